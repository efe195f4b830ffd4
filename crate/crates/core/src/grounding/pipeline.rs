use serde::{Deserialize, Serialize};

use crate::backends::{Backend, BackendError, BackendExt};
use crate::par::parallel_map;
use crate::scenes::{FrameSequence, SceneSegment};
use crate::templates::Template;

use super::{
    associate_tracks, extract_noun_phrases, match_phrases_embedding, match_phrases_llm, track_embeddings,
    Detection, FrameDetections, GroundingError, GroundingOptions, Matcher, NounPhrase, Observation, PhraseMatch,
    Track,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentFailure {
    pub segment: SceneSegment,
    pub error: String,
    /// The failure came from the transport rather than a bad payload.
    pub transport: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundingOutput {
    pub phrases: Vec<NounPhrase>,
    /// Every track, ids unique across the video, in segment order.
    pub tracks: Vec<Track>,
    pub matches: Vec<(PhraseMatch, Track)>,
    pub failures: Vec<SegmentFailure>,
    /// Image tags per sampled frame, in segment order.
    pub frame_tags: Vec<String>,
}

impl GroundingOutput {
    /// Best match for a phrase across segments (highest similarity, then
    /// first segment).
    pub fn track_for_phrase(&self, phrase: &str) -> Option<&Track> {
        self.matches
            .iter()
            .filter(|(m, _)| m.phrase.text() == phrase)
            .max_by(|a, b| {
                let sa = a.0.similarity.unwrap_or(1.0);
                let sb = b.0.similarity.unwrap_or(1.0);
                sa.total_cmp(&sb).then(b.1.track_id.cmp(&a.1.track_id))
            })
            .map(|(_, t)| t)
    }

    pub fn records(&self, video_id: &str) -> Vec<TrackRecord> {
        self.tracks
            .iter()
            .map(|t| {
                let best = self
                    .matches
                    .iter()
                    .filter(|(m, _)| m.track_id == t.track_id)
                    .max_by(|a, b| {
                        a.0.similarity
                            .unwrap_or(1.0)
                            .total_cmp(&b.0.similarity.unwrap_or(1.0))
                    });
                TrackRecord {
                    video_id: video_id.to_string(),
                    track_id: t.track_id,
                    tag: t.tag.clone(),
                    phrase: best.map(|(m, _)| m.phrase.text().to_string()),
                    similarity: best.and_then(|(m, _)| m.similarity),
                    observations: t.observations.clone(),
                }
            })
            .collect()
    }
}

/// One line of a track JSONL artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub video_id: String,
    pub track_id: u64,
    pub tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phrase: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
    pub observations: Vec<Observation>,
}

impl TrackRecord {
    pub fn track(&self) -> Track {
        Track {
            track_id: self.track_id,
            tag: self.tag.clone(),
            observations: self.observations.clone(),
        }
    }
}

pub struct GroundingTemplates {
    pub noun_phrases: Template,
    pub entity_match: Template,
}

impl Default for GroundingTemplates {
    fn default() -> Self {
        Self {
            noun_phrases: Template::builtin("noun_phrases").expect("bundled template"),
            entity_match: Template::builtin("entity_match").expect("bundled template"),
        }
    }
}

fn sampled_frames(seg: &SceneSegment, fps: f64, per_second: f64) -> Vec<usize> {
    let step = ((fps / per_second).round() as usize).max(1);
    (seg.start_frame..seg.end_frame).step_by(step).collect()
}

struct SegmentResult {
    tracks: Vec<Track>,
    matches: Vec<PhraseMatch>,
}

fn failure(seg: SceneSegment, e: &GroundingError) -> SegmentFailure {
    let transport = matches!(e, GroundingError::Backend(b) if b.is_transport());
    SegmentFailure {
        segment: seg,
        error: e.to_string(),
        transport,
    }
}

fn tag_segment(
    video: &FrameSequence,
    samples: &[usize],
    backend: &dyn Backend,
) -> Result<Vec<Vec<String>>, BackendError> {
    samples
        .iter()
        .map(|&f| Ok(backend.tag_image(&video.frames()[f])?.into_iter().map(|t| t.label).collect()))
        .collect()
}

fn ground_segment(
    video: &FrameSequence,
    samples: &[usize],
    tags: &[Vec<String>],
    phrases: &[NounPhrase],
    backend: &dyn Backend,
    options: &GroundingOptions,
    templates: &GroundingTemplates,
) -> Result<SegmentResult, GroundingError> {
    let mut vocabulary: Vec<String> = Vec::new();
    for t in tags.iter().flatten() {
        if !vocabulary.contains(t) {
            vocabulary.push(t.clone());
        }
    }
    if vocabulary.is_empty() {
        return Ok(SegmentResult { tracks: Vec::new(), matches: Vec::new() });
    }
    let (w, h) = video.dimensions().expect("non-empty video");

    let mut frames = Vec::with_capacity(samples.len());
    for &f in samples {
        let detections = backend
            .detect(&video.frames()[f], &vocabulary)?
            .into_iter()
            .filter_map(|d| {
                Some(Detection {
                    frame_idx: f,
                    bbox: d.bbox.clipped(w, h)?,
                    score: d.score.clamp(0.0, 1.0),
                    tag: d.tag,
                })
            })
            .collect();
        frames.push(FrameDetections { frame_idx: f, detections });
    }
    let mut tracks = associate_tracks(&frames, options.iou_gate, options.max_missed);

    if options.masks {
        for t in &mut tracks {
            for o in &mut t.observations {
                o.mask_rle = Some(backend.segment_mask(&video.frames()[o.frame_idx], o.bbox)?);
            }
        }
    }

    let matches = match options.matcher {
        Matcher::Embedding => {
            let embedded = track_embeddings(&tracks, video.frames(), options.crop_padding, backend)?;
            match_phrases_embedding(phrases, &embedded, backend, options.sim_floor)?
        }
        Matcher::Llm => {
            let tags: Vec<(u64, String)> = tracks.iter().map(|t| (t.track_id, t.tag.clone())).collect();
            match_phrases_llm(phrases, &tags, backend, &templates.entity_match)
        }
    };

    if !options.masks {
        tracks.iter_mut().for_each(Track::densify);
    }
    Ok(SegmentResult { tracks, matches })
}

/// Ground `response_text` in `video` shot by shot.
///
/// Each segment's sampled frames are tagged; the key phrases are extracted
/// from the response (falling back to the frame tags); then every segment is
/// detected, tracked, optionally masked and matched independently. A backend
/// failure aborts only its own segment and is reported in `failures`.
#[allow(clippy::too_many_arguments)]
pub fn ground_video(
    video: &FrameSequence,
    scenes: &[SceneSegment],
    response_text: &str,
    backend: &dyn Backend,
    options: &GroundingOptions,
    templates: &GroundingTemplates,
    workers: usize,
) -> Result<GroundingOutput, GroundingError> {
    let samples: Vec<Vec<usize>> = scenes
        .iter()
        .map(|s| {
            if s.end_frame > video.len() {
                Err(GroundingError::FrameOutOfRange(s.end_frame - 1))
            } else {
                Ok(sampled_frames(s, video.fps(), options.samples_per_second))
            }
        })
        .collect::<Result<_, _>>()?;

    let tagged = parallel_map(&samples, workers, |_, s| tag_segment(video, s, backend));
    let frame_tags: Vec<String> = tagged.iter().flat_map(|r| r.iter().flatten().flatten().cloned()).collect();

    let phrases = if response_text.trim().is_empty() {
        Vec::new()
    } else {
        extract_noun_phrases(response_text, backend, &templates.noun_phrases, &frame_tags)?
    };

    let indices: Vec<usize> = (0..scenes.len()).collect();
    let results = parallel_map(&indices, workers, |_, &i| {
        let seg = scenes[i];
        let tags = tagged[i].as_ref().map_err(|b| SegmentFailure {
            segment: seg,
            error: b.to_string(),
            transport: b.is_transport(),
        })?;
        ground_segment(video, &samples[i], tags, &phrases, backend, options, templates).map_err(|e| failure(seg, &e))
    });

    let mut out = GroundingOutput {
        phrases,
        frame_tags,
        ..Default::default()
    };
    let mut next_id = 0u64;
    for r in results {
        let r = match r {
            Ok(r) => r,
            Err(f) => {
                log::warn!("segment [{}, {}) failed: {}", f.segment.start_frame, f.segment.end_frame, f.error);
                out.failures.push(f);
                continue;
            }
        };
        let offset = next_id;
        let mut tracks = r.tracks;
        for t in &mut tracks {
            t.track_id += offset;
        }
        next_id += tracks.len() as u64;
        for mut m in r.matches {
            m.track_id += offset;
            let track = tracks
                .iter()
                .find(|t| t.track_id == m.track_id)
                .expect("match refers to a segment track")
                .clone();
            out.matches.push((m, track));
        }
        out.tracks.extend(tracks);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{EndpointKind, MockBackend, MockReply, MOCK_VOCABULARY};
    use image::{Rgb, RgbImage};

    /// Two 10-frame shots at 5 fps with one red ball moving right; the
    /// background changes color at the cut.
    fn fixture() -> (FrameSequence, Vec<SceneSegment>) {
        let frames = (0..20)
            .map(|i| {
                let bg = if i < 10 { [90, 90, 90] } else { [20, 20, 20] };
                let mut img = RgbImage::from_pixel(64, 48, Rgb(bg));
                let x0 = 4 + (i % 10) as u32;
                for y in 10..20 {
                    for x in x0..x0 + 10 {
                        img.put_pixel(x, y, Rgb(MOCK_VOCABULARY[0].1));
                    }
                }
                img
            })
            .collect();
        let scenes = vec![
            SceneSegment { start_frame: 0, end_frame: 10 },
            SceneSegment { start_frame: 10, end_frame: 20 },
        ];
        (FrameSequence::new(frames, 5.0).unwrap(), scenes)
    }

    #[test]
    fn one_track_per_segment_matched_to_ball() {
        let (video, scenes) = fixture();
        let backend = MockBackend::new(7);
        let out = ground_video(&video, &scenes, "A red ball rolls to the right.", &backend, &GroundingOptions::default(), &GroundingTemplates::default(), 2).unwrap();
        assert_eq!(out.phrases.iter().map(|p| p.text()).collect::<Vec<_>>(), vec!["ball"]);
        assert_eq!(out.tracks.len(), 2);
        assert_eq!(out.tracks.iter().map(|t| t.track_id).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(out.matches.len(), 2);
        assert!(out.matches.iter().all(|(m, _)| m.phrase.text() == "ball"));
        // densified across the sampled frames 0 and 5 (then 10 and 15)
        assert_eq!(out.tracks[0].first_frame(), 0);
        assert_eq!(out.tracks[0].last_frame(), 5);
        assert!(out.failures.is_empty());
    }

    #[test]
    fn empty_response_still_tracks() {
        let (video, scenes) = fixture();
        let out = ground_video(&video, &scenes, "", &MockBackend::new(7), &GroundingOptions::default(), &GroundingTemplates::default(), 1).unwrap();
        assert!(out.phrases.is_empty());
        assert!(out.matches.is_empty());
        assert_eq!(out.tracks.len(), 2);
    }

    #[test]
    fn nothing_detected() {
        let (video, scenes) = fixture();
        let backend = MockBackend::new(7).script_kind(
            EndpointKind::Detect,
            MockReply::Reply(crate::backends::Response::Detect(crate::backends::DetectResponse { detections: vec![] })),
        );
        let out = ground_video(&video, &scenes, "a ball", &backend, &GroundingOptions::default(), &GroundingTemplates::default(), 1).unwrap();
        assert!(out.tracks.is_empty() && out.matches.is_empty() && out.failures.is_empty());
    }

    #[test]
    fn backend_failure_is_confined_to_segment() {
        let (video, scenes) = fixture();
        let backend = MockBackend::new(7).script_kind(EndpointKind::Detect, MockReply::Down);
        let out = ground_video(&video, &scenes, "a ball", &backend, &GroundingOptions::default(), &GroundingTemplates::default(), 1).unwrap();
        assert_eq!(out.failures.len(), 2);
        assert!(out.failures.iter().all(|f| f.transport));
    }

    #[test]
    fn masks_and_llm_matcher() {
        let (video, scenes) = fixture();
        let opts = GroundingOptions { masks: true, matcher: Matcher::Llm, ..Default::default() };
        let out = ground_video(&video, &scenes, "the ball", &MockBackend::new(7), &opts, &GroundingTemplates::default(), 1).unwrap();
        assert_eq!(out.matches.len(), 2);
        assert!(out.matches.iter().all(|(m, _)| m.similarity.is_none()));
        let obs = &out.tracks[0].observations[0];
        assert_eq!(obs.mask_rle.as_ref().unwrap().to_box().unwrap(), obs.bbox);
        assert_eq!(out.tracks[0].observations.len(), 2);
    }

    #[test]
    fn records_carry_phrase() {
        let (video, scenes) = fixture();
        let out = ground_video(&video, &scenes, "ball", &MockBackend::new(7), &GroundingOptions::default(), &GroundingTemplates::default(), 1).unwrap();
        let recs = out.records("v");
        assert_eq!(recs[1].phrase.as_deref(), Some("ball"));
        assert!(recs[1].similarity.unwrap() > 0.8);
        assert!(out.track_for_phrase("ball").is_some());
        assert!(out.track_for_phrase("cat").is_none());
    }
}
