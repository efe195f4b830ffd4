use serde::{Deserialize, Serialize};

use crate::backends::{Backend, BackendExt};
use crate::geometry::{iou, BBox};
use crate::grounding::{ground_video, select_key_phrase, GroundingOptions, GroundingTemplates, Track};
use crate::scenes::{FrameSequence, SceneSegment};
use crate::templates::Template;

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtFrame {
    pub frame_idx: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// One line of a spatial grounding dataset. VidSTG-style items carry an
/// annotated `prompt`; HC-STVG-style items carry a `caption` from which
/// questions are mined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundingGtItem {
    pub video_id: String,
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    /// Precomputed model response; when absent the chat backend answers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    pub frames: Vec<GtFrame>,
}

impl GroundingGtItem {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.frames.is_empty() {
            return Err(EvalError::InvalidItem(format!("{}: no annotated frames", self.video_id)));
        }
        let mut seen: Vec<usize> = self.frames.iter().map(|f| f.frame_idx).collect();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(EvalError::InvalidItem(format!("{}: duplicate annotated frame", self.video_id)));
        }
        if self.prompt.is_none() && self.caption.is_none() {
            return Err(EvalError::InvalidItem(format!("{}: needs a prompt or a caption", self.video_id)));
        }
        Ok(())
    }
}

/// Keep only prompts annotated as interrogative. A missing annotation drops
/// the item with a warning.
pub fn select_interrogative(item: &GroundingGtItem) -> bool {
    match item.prompt_type.as_deref() {
        Some(t) => t.trim().eq_ignore_ascii_case("interrogative"),
        None => {
            log::warn!("{}: prompt has no type annotation; dropped", item.video_id);
            false
        }
    }
}

/// Question lines of a mining reply, numbering and bullets removed.
pub fn parse_questions(reply: &str) -> Vec<String> {
    reply
        .lines()
        .filter_map(|l| {
            let l = l.trim().trim_start_matches(['-', '*', '•']).trim_start();
            let digits = l.chars().take_while(|c| c.is_ascii_digit()).count();
            let l = if digits > 0 {
                let rest = &l[digits..];
                rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')).unwrap_or(l).trim_start()
            } else {
                l
            };
            l.ends_with('?').then(|| l.to_string())
        })
        .collect()
}

pub fn mine_questions(caption: &str, chat: &dyn Backend, template: &Template) -> Result<Vec<String>, EvalError> {
    if caption.trim().is_empty() {
        return Err(EvalError::EmptyCaption);
    }
    let prompt = template
        .render(&[("caption", caption.trim())])
        .expect("mining template has a caption placeholder");
    match chat.chat(&prompt, 256) {
        Ok(reply) => Ok(parse_questions(&reply)),
        Err(e) => {
            log::warn!("question mining failed: {e}");
            Ok(Vec::new())
        }
    }
}

/// Mean over annotated frames of the IoU between the track's box on that
/// frame and the ground truth. Frames the track does not cover score 0, as
/// does a missing track.
pub fn eval_spatial_grounding(track: Option<&Track>, gt: &[GtFrame]) -> f64 {
    if gt.is_empty() {
        return 0.0;
    }
    let Some(track) = track else {
        return 0.0;
    };
    let total: f64 = gt
        .iter()
        .map(|g| track.box_at(g.frame_idx).map_or(0.0, |b| iou(&b, &g.bbox)))
        .sum();
    total / gt.len() as f64
}

/// Mean of item scores, ×100. `None` when there are no items.
pub fn dataset_score(item_scores: &[f64]) -> Option<f64> {
    if item_scores.is_empty() {
        return None;
    }
    Some(100.0 * item_scores.iter().sum::<f64>() / item_scores.len() as f64)
}

pub struct GroundingEvalContext<'a> {
    pub backend: &'a dyn Backend,
    pub options: &'a GroundingOptions,
    pub grounding_templates: &'a GroundingTemplates,
    pub answer_template: &'a Template,
    pub mine_template: &'a Template,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub question: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_phrase: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_id: Option<u64>,
    pub iou: f64,
}

/// Per-item JSONL record of a grounding evaluation. `score` is `None` when
/// the item was dropped (no interrogative prompt, no mined question).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub video_id: String,
    pub dataset: String,
    pub score: Option<f64>,
    pub questions: Vec<QuestionScore>,
    pub failed_segments: usize,
}

fn answer(question: &str, item: &GroundingGtItem, ctx: &GroundingEvalContext) -> Result<String, EvalError> {
    if let Some(r) = &item.response {
        return Ok(r.clone());
    }
    let prompt = ctx
        .answer_template
        .render(&[("question", question)])
        .expect("answer template has a question placeholder");
    Ok(ctx.backend.chat(&prompt, 256)?)
}

/// Answer, ground and score every question of one item. The key phrase is the
/// first phrase extracted from the response, falling back to the frame tags.
pub fn evaluate_grounding_item(
    item: &GroundingGtItem,
    video: &FrameSequence,
    scenes: &[SceneSegment],
    ctx: &GroundingEvalContext,
) -> Result<ItemScore, EvalError> {
    item.validate()?;
    let questions = match (&item.caption, &item.prompt) {
        (Some(caption), _) => mine_questions(caption, ctx.backend, ctx.mine_template)?,
        (None, Some(prompt)) if select_interrogative(item) => vec![prompt.clone()],
        _ => Vec::new(),
    };

    let mut scores = Vec::new();
    let mut failed_segments = 0;
    for question in questions {
        let response = answer(&question, item, ctx)?;
        let out = ground_video(
            video,
            scenes,
            &response,
            ctx.backend,
            ctx.options,
            ctx.grounding_templates,
            ctx.workers,
        )?;
        if let Some(f) = out.failures.iter().find(|f| f.transport) {
            return Err(EvalError::SegmentTransport(format!("{}: {}", item.video_id, f.error)));
        }
        failed_segments += out.failures.len();
        let key = match out.phrases.first() {
            Some(p) => Some(p.text().to_string()),
            None => select_key_phrase(&response, &out.frame_tags).ok().map(|p| p.text().to_string()),
        };
        let track = key.as_deref().and_then(|k| out.track_for_phrase(k));
        if track.is_none() {
            log::info!("{}: no track for key phrase {:?}", item.video_id, key);
        }
        scores.push(QuestionScore {
            question,
            response,
            track_id: track.map(|t| t.track_id),
            iou: eval_spatial_grounding(track, &item.frames),
            key_phrase: key,
        });
    }
    let score = (!scores.is_empty()).then(|| scores.iter().map(|s| s.iou).sum::<f64>() / scores.len() as f64);
    Ok(ItemScore {
        video_id: item.video_id.clone(),
        dataset: item.dataset.clone(),
        score,
        questions: scores,
        failed_segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::MockBackend;
    use crate::grounding::Observation;

    fn gt(f: usize, b: [f64; 4]) -> GtFrame {
        GtFrame { frame_idx: f, bbox: BBox::new(b[0], b[1], b[2], b[3]).unwrap() }
    }

    fn track_of(frames: &[GtFrame]) -> Track {
        Track {
            track_id: 0,
            tag: "x".into(),
            observations: frames
                .iter()
                .map(|g| Observation { frame_idx: g.frame_idx, bbox: g.bbox, score: 1.0, mask_rle: None, interpolated: false })
                .collect(),
        }
    }

    #[test]
    fn identical_is_one_absent_is_zero() {
        let g = vec![gt(0, [0.0, 0.0, 4.0, 4.0]), gt(3, [1.0, 1.0, 5.0, 6.0])];
        assert_eq!(eval_spatial_grounding(Some(&track_of(&g)), &g), 1.0);
        assert_eq!(eval_spatial_grounding(None, &g), 0.0);
    }

    #[test]
    fn one_seventh() {
        let g = vec![gt(0, [0.0, 0.0, 2.0, 2.0])];
        let p = vec![gt(0, [1.0, 1.0, 3.0, 3.0])];
        assert!((eval_spatial_grounding(Some(&track_of(&p)), &g) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn uncovered_frames_score_zero() {
        let g = vec![gt(0, [0.0, 0.0, 2.0, 2.0]), gt(9, [0.0, 0.0, 2.0, 2.0])];
        assert_eq!(eval_spatial_grounding(Some(&track_of(&g[..1])), &g), 0.5);
    }

    #[test]
    fn dataset_mean_times_hundred() {
        assert_eq!(dataset_score(&[1.0, 0.5]), Some(75.0));
        assert_eq!(dataset_score(&[]), None);
    }

    #[test]
    fn interrogative_selection() {
        let mut item = GroundingGtItem {
            video_id: "v".into(),
            dataset: "vidstg".into(),
            prompt: Some("what is red?".into()),
            prompt_type: Some("interrogative".into()),
            caption: None,
            response: None,
            frames: vec![gt(0, [0.0, 0.0, 1.0, 1.0])],
        };
        assert!(select_interrogative(&item));
        item.prompt_type = Some("declarative".into());
        assert!(!select_interrogative(&item));
        item.prompt_type = None;
        assert!(!select_interrogative(&item));
    }

    #[test]
    fn mining() {
        let tpl = Template::builtin("mine_questions").unwrap();
        let chat = MockBackend::new(0).with_chat_reply("What is the man holding?");
        assert_eq!(mine_questions("a man", &chat, &tpl).unwrap(), vec!["What is the man holding?"]);
        let chat = MockBackend::new(0).with_chat_reply("Here you go:\n1. Who runs?\n2) Where is the dog?");
        assert_eq!(mine_questions("c", &chat, &tpl).unwrap(), vec!["Who runs?", "Where is the dog?"]);
        assert!(matches!(mine_questions(" ", &chat, &tpl), Err(EvalError::EmptyCaption)));
        let down = MockBackend::new(0).script_kind(crate::backends::EndpointKind::Chat, crate::backends::MockReply::Down);
        assert!(mine_questions("c", &down, &tpl).unwrap().is_empty());
    }

    #[test]
    fn item_validation() {
        let item = GroundingGtItem {
            video_id: "v".into(),
            dataset: "vidstg".into(),
            prompt: None,
            prompt_type: None,
            caption: None,
            response: None,
            frames: vec![],
        };
        assert!(item.validate().is_err());
        let json = r#"{"video_id":"v","dataset":"d","prompt":"p","frames":[{"frame_idx":0,"box":[3,0,1,1]}]}"#;
        assert!(serde_json::from_str::<GroundingGtItem>(json).is_err());
    }
}
