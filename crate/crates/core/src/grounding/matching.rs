use image::RgbImage;

use crate::backends::{Backend, BackendExt};
use crate::templates::Template;

use super::{normalize_phrase, GroundingError, NounPhrase, PhraseMatch, Track};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// For each phrase, the track whose embedding has the highest cosine
/// similarity, if that similarity reaches `sim_floor`. Ties go to the lowest
/// track id. A track may serve several phrases.
pub fn assign_phrases(
    phrases: &[(NounPhrase, Vec<f64>)],
    tracks: &[(u64, Vec<f64>)],
    sim_floor: f64,
) -> Result<Vec<PhraseMatch>, GroundingError> {
    let width = phrases
        .first()
        .map(|p| p.1.len())
        .or_else(|| tracks.first().map(|t| t.1.len()));
    if let Some(w) = width {
        if let Some(bad) = phrases.iter().map(|p| p.1.len()).chain(tracks.iter().map(|t| t.1.len())).find(|&l| l != w) {
            return Err(GroundingError::EmbeddingWidth(bad, w));
        }
    }
    let mut out = Vec::new();
    for (phrase, pv) in phrases {
        let best = tracks
            .iter()
            .map(|(id, tv)| (*id, cosine(pv, tv)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((track_id, sim)) = best {
            if sim >= sim_floor {
                out.push(PhraseMatch {
                    phrase: phrase.clone(),
                    track_id,
                    similarity: Some(sim),
                });
            }
        }
    }
    Ok(out)
}

/// Crop around the track's highest-score observation (earliest on ties),
/// padded by `padding` of the box size on each side and clipped to the frame.
pub fn representative_crop(track: &Track, frames: &[RgbImage], padding: f64) -> Result<RgbImage, GroundingError> {
    let key = track
        .observations
        .iter()
        .filter(|o| !o.interpolated)
        .max_by(|a, b| a.score.total_cmp(&b.score).then(b.frame_idx.cmp(&a.frame_idx)))
        .ok_or(GroundingError::EmptyTrack(track.track_id))?;
    let frame = frames.get(key.frame_idx).ok_or(GroundingError::FrameOutOfRange(key.frame_idx))?;
    let (w, h) = frame.dimensions();
    let bbox = key
        .effective_box()
        .padded_clipped(padding, w, h)
        .ok_or(GroundingError::FrameOutOfRange(key.frame_idx))?;
    let (x1, y1, x2, y2) = bbox.pixel_bounds();
    let (x2, y2) = (x2.min(w), y2.min(h));
    Ok(image::imageops::crop_imm(frame, x1, y1, (x2 - x1).max(1), (y2 - y1).max(1)).to_image())
}

/// Image embedding of each track's representative crop.
pub fn track_embeddings(
    tracks: &[Track],
    frames: &[RgbImage],
    padding: f64,
    backend: &dyn Backend,
) -> Result<Vec<(u64, Vec<f64>)>, GroundingError> {
    tracks
        .iter()
        .map(|t| {
            let crop = representative_crop(t, frames, padding)?;
            Ok((t.track_id, backend.embed_image(&crop)?))
        })
        .collect()
}

/// Embed phrases with the text encoder and assign them against precomputed
/// track crop embeddings.
pub fn match_phrases_embedding(
    phrases: &[NounPhrase],
    tracks: &[(u64, Vec<f64>)],
    backend: &dyn Backend,
    sim_floor: f64,
) -> Result<Vec<PhraseMatch>, GroundingError> {
    if phrases.is_empty() || tracks.is_empty() {
        return Ok(Vec::new());
    }
    let embedded = phrases
        .iter()
        .map(|p| Ok((p.clone(), backend.embed_text(p.text())?)))
        .collect::<Result<Vec<_>, GroundingError>>()?;
    assign_phrases(&embedded, tracks, sim_floor)
}

/// Ask the chat backend to pair phrases with `(track_id, tag)` entries.
/// Reply lines of the form `phrase->id` naming a known phrase and track are
/// kept; anything else is dropped. A backend failure yields no matches.
pub fn match_phrases_llm(
    phrases: &[NounPhrase],
    track_tags: &[(u64, String)],
    chat: &dyn Backend,
    template: &Template,
) -> Vec<PhraseMatch> {
    if phrases.is_empty() || track_tags.is_empty() {
        return Vec::new();
    }
    let phrase_block = phrases.iter().map(NounPhrase::text).collect::<Vec<_>>().join("\n");
    let track_block = track_tags
        .iter()
        .map(|(id, tag)| format!("{id}: {tag}"))
        .collect::<Vec<_>>()
        .join("\n");
    let prompt = template
        .render(&[("phrases", &phrase_block), ("tracks", &track_block)])
        .expect("entity match template has phrases and tracks placeholders");
    let reply = match chat.chat(&prompt, 256) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("entity matching failed: {e}");
            return Vec::new();
        }
    };

    let mut out: Vec<PhraseMatch> = Vec::new();
    for item in reply.split(['\n', ',', ';']) {
        let Some((p, id)) = item.split_once("->") else { continue };
        let p = normalize_phrase(p.trim().trim_start_matches(['-', '*']).trim_matches('"'));
        let Ok(id) = id.trim().trim_end_matches('.').parse::<u64>() else { continue };
        let Some(phrase) = phrases.iter().find(|q| q.text() == p) else { continue };
        if !track_tags.iter().any(|(t, _)| *t == id) {
            log::warn!("entity matcher named unknown track {id}");
            continue;
        }
        if out.iter().any(|m| m.phrase.text() == p) {
            continue;
        }
        out.push(PhraseMatch {
            phrase: phrase.clone(),
            track_id: id,
            similarity: None,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{EndpointKind, MockBackend, MockReply};
    use crate::geometry::BBox;
    use crate::grounding::{Observation, PhraseSource};

    fn phrase(s: &str) -> NounPhrase {
        NounPhrase::new(s, PhraseSource::Llm).unwrap()
    }

    #[test]
    fn identical_vectors_match_exactly() {
        let m = assign_phrases(
            &[(phrase("ball"), vec![0.3, 0.4])],
            &[(0, vec![1.0, 0.0]), (1, vec![0.3, 0.4])],
            0.25,
        )
        .unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].track_id, 1);
        assert!((m[0].similarity.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_below_floor() {
        let m = assign_phrases(&[(phrase("x"), vec![0.0, 1.0])], &[(0, vec![1.0, 0.0])], 0.25).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn hand_cosine() {
        let m = assign_phrases(
            &[(phrase("ball"), vec![0.0, 1.0])],
            &[(0, vec![1.0, 0.0]), (1, vec![0.6, 0.8])],
            0.25,
        )
        .unwrap();
        assert_eq!(m[0].track_id, 1);
        assert!((m[0].similarity.unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn ties_prefer_lowest_id() {
        let m = assign_phrases(&[(phrase("a"), vec![1.0, 0.0])], &[(5, vec![2.0, 0.0]), (3, vec![1.0, 0.0])], 0.0)
            .unwrap();
        assert_eq!(m[0].track_id, 3);
    }

    #[test]
    fn width_mismatch() {
        let r = assign_phrases(&[(phrase("a"), vec![1.0, 0.0, 0.0])], &[(0, vec![1.0, 0.0])], 0.0);
        assert!(matches!(r, Err(GroundingError::EmbeddingWidth(2, 3))));
    }

    #[test]
    fn llm_matching_contract() {
        let tpl = Template::builtin("entity_match").unwrap();
        let tags = vec![(0u64, "man".to_string())];
        let chat = MockBackend::new(0).with_chat_reply("man->0");
        let m = match_phrases_llm(&[phrase("man")], &tags, &chat, &tpl);
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].phrase.text(), m[0].track_id), ("man", 0));

        let chat = MockBackend::new(0).with_chat_reply("man->7");
        assert!(match_phrases_llm(&[phrase("man")], &tags, &chat, &tpl).is_empty());

        let chat = MockBackend::new(0).script_kind(EndpointKind::Chat, MockReply::Fail("x".into()));
        assert!(match_phrases_llm(&[phrase("man")], &tags, &chat, &tpl).is_empty());
        // no phrases: no backend call, which a Down script would otherwise turn into a warning
        let chat = MockBackend::new(0).script_kind(EndpointKind::Chat, MockReply::Down);
        assert!(match_phrases_llm(&[], &tags, &chat, &tpl).is_empty());
    }

    #[test]
    fn crop_uses_best_observation_with_padding() {
        let frames = vec![RgbImage::new(100, 50), RgbImage::new(100, 50)];
        let o = |f, s, x| Observation {
            frame_idx: f,
            bbox: BBox::new(x, 10.0, x + 20.0, 30.0).unwrap(),
            score: s,
            mask_rle: None,
            interpolated: false,
        };
        let t = Track { track_id: 0, tag: "a".into(), observations: vec![o(0, 0.5, 0.0), o(1, 0.9, 40.0)] };
        let crop = representative_crop(&t, &frames, 0.1).unwrap();
        assert_eq!(crop.dimensions(), (24, 24));
        let edge = Track { track_id: 1, tag: "a".into(), observations: vec![o(0, 0.5, 0.0)] };
        assert_eq!(representative_crop(&edge, &frames, 0.1).unwrap().dimensions(), (22, 24));
    }
}
