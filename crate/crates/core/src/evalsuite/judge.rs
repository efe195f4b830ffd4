use serde::Deserialize;

use crate::backends::{Backend, BackendError, BackendExt};
use crate::par::parallel_map;
use crate::templates::Template;

use super::{ConvBenchItem, JudgeVerdict, Metric, Pred, QaItem};

const JUDGE_MAX_TOKENS: u32 = 64;

#[derive(Deserialize)]
struct WireVerdict {
    pred: String,
    score: f64,
}

/// Byte ranges of balanced `{...}` spans, in order of their opening brace.
/// Braces inside JSON strings do not count.
fn balanced_objects(text: &str) -> Vec<&str> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    for start in (0..bytes.len()).filter(|&i| bytes[i] == b'{') {
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        for (j, &c) in bytes.iter().enumerate().skip(start) {
            if in_str {
                match c {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_str = false,
                    _ => {}
                }
                continue;
            }
            match c {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        out.push(&text[start..=j]);
                        break;
                    }
                }
                _ => {}
            }
        }
    }
    out
}

/// First well-formed `{"pred": ..., "score": ...}` object in a judge reply.
/// `pred` must be yes/no/n/a and `score` an integer in 1..=5.
pub fn parse_verdict(reply: &str) -> Option<(Pred, u8)> {
    balanced_objects(reply).into_iter().find_map(|obj| {
        let w: WireVerdict = serde_json::from_str(obj).ok()?;
        let pred = Pred::parse(&w.pred)?;
        if w.score.fract() != 0.0 || !(1.0..=5.0).contains(&w.score) {
            return None;
        }
        Some((pred, w.score as u8))
    })
}

/// Ask `chat` to judge a rendered prompt, re-asking while the reply does not
/// parse. `attempts` is the total number of asks (at least one). Transport
/// failures are returned as errors; any other backend error counts as a
/// failed attempt.
pub fn judge_prompt(prompt: &str, chat: &dyn Backend, attempts: u32) -> Result<JudgeVerdict, BackendError> {
    let mut raw = String::new();
    for attempt in 0..attempts.max(1) {
        match chat.chat(prompt, JUDGE_MAX_TOKENS) {
            Ok(reply) => {
                if let Some((pred, score)) = parse_verdict(&reply) {
                    return Ok(JudgeVerdict {
                        pred,
                        score: Some(score),
                        raw: reply,
                        valid: true,
                    });
                }
                log::debug!("judge reply {attempt} did not parse: {reply:?}");
                raw = reply;
            }
            Err(e) if e.is_transport() => return Err(e),
            Err(e) => raw = e.to_string(),
        }
    }
    Ok(JudgeVerdict::invalid(raw))
}

/// Templates for the five conversation metrics and QA.
#[derive(Debug, Clone)]
pub struct JudgeTemplates {
    pub correctness: Template,
    pub detail: Template,
    pub context: Template,
    pub temporal: Template,
    pub consistency: Template,
    pub qa: Template,
}

impl Default for JudgeTemplates {
    fn default() -> Self {
        let b = |n| Template::builtin(n).expect("bundled judge template");
        Self {
            correctness: b("judge_correctness"),
            detail: b("judge_detail"),
            context: b("judge_context"),
            temporal: b("judge_temporal"),
            consistency: b("judge_consistency"),
            qa: b("judge_qa"),
        }
    }
}

impl JudgeTemplates {
    pub fn for_metric(&self, m: Metric) -> &Template {
        match m {
            Metric::Correctness => &self.correctness,
            Metric::Detail => &self.detail,
            Metric::Context => &self.context,
            Metric::Temporal => &self.temporal,
            Metric::Consistency => &self.consistency,
        }
    }

    pub fn all(&self) -> [&Template; 6] {
        [&self.correctness, &self.detail, &self.context, &self.temporal, &self.consistency, &self.qa]
    }
}

pub fn conv_prompt(item: &ConvBenchItem, templates: &JudgeTemplates) -> String {
    let q2 = item.question2.as_deref().unwrap_or("");
    let a2 = item.model_answer2.as_deref().unwrap_or("");
    templates
        .for_metric(item.metric)
        .render(&[
            ("question", &item.question),
            ("reference", &item.reference_answer),
            ("prediction", &item.model_answer),
            ("question2", q2),
            ("prediction2", a2),
        ])
        .expect("judge templates only use item fields")
}

pub fn judge_item(
    item: &ConvBenchItem,
    chat: &dyn Backend,
    templates: &JudgeTemplates,
    retries: u32,
) -> Result<JudgeVerdict, BackendError> {
    judge_prompt(&conv_prompt(item, templates), chat, retries)
}

pub fn judge_qa_item(
    item: &QaItem,
    chat: &dyn Backend,
    template: &Template,
    retries: u32,
) -> Result<JudgeVerdict, BackendError> {
    let prompt = template
        .render(&[
            ("question", &item.question),
            ("reference", &item.reference_answer),
            ("prediction", &item.model_answer),
        ])
        .expect("qa template only uses item fields");
    judge_prompt(&prompt, chat, retries)
}

/// Judge every item with at most `max_in_flight` calls outstanding. Results
/// come back in item order whatever the completion order.
pub fn judge_all<T: Sync>(
    items: &[T],
    max_in_flight: usize,
    judge: impl Fn(&T) -> Result<JudgeVerdict, BackendError> + Sync,
) -> Vec<Result<JudgeVerdict, BackendError>> {
    parallel_map(items, max_in_flight, |_, item| judge(item))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{ChatResponse, EndpointKind, MockBackend, MockReply, Response};

    fn reply(text: &str) -> MockReply {
        MockReply::Reply(Response::Chat(ChatResponse { text: text.into() }))
    }

    #[test]
    fn parses_plain_and_embedded() {
        assert_eq!(parse_verdict(r#"{"pred":"yes","score":4}"#), Some((Pred::Yes, 4)));
        assert_eq!(
            parse_verdict(r#"Sure! {"pred":"no","score":2} hope that helps"#),
            Some((Pred::No, 2))
        );
        assert_eq!(parse_verdict(r#"{"pred": "n/a", "score": 3.0}"#), Some((Pred::NotApplicable, 3)));
    }

    #[test]
    fn skips_malformed_objects() {
        assert_eq!(parse_verdict(r#"{"pred":"maybe","score":3} {"pred":"yes","score":5}"#), Some((Pred::Yes, 5)));
        assert_eq!(parse_verdict(r#"{"pred":"yes","score":9}"#), None);
        assert_eq!(parse_verdict(r#"{"pred":"yes","score":2.5}"#), None);
        assert_eq!(parse_verdict(r#"{"note": "a } brace", "pred":"no","score":1}"#), Some((Pred::No, 1)));
        assert_eq!(parse_verdict("no json here"), None);
        assert_eq!(parse_verdict("{unterminated"), None);
    }

    #[test]
    fn retries_exhausted_is_invalid() {
        let chat = MockBackend::new(0).script_kind(EndpointKind::Chat, reply("I think it is fine."));
        let v = judge_prompt("### task: judge_qa v1\nQ", &chat, 3).unwrap();
        assert!(!v.valid);
        assert_eq!(v.score, None);
        assert_eq!(v.raw, "I think it is fine.");
    }

    #[test]
    fn transport_is_distinct() {
        let chat = MockBackend::new(0).script_kind(EndpointKind::Chat, MockReply::Down);
        assert!(judge_prompt("x", &chat, 3).unwrap_err().is_transport());
        let chat = MockBackend::new(0).script_kind(EndpointKind::Chat, MockReply::Fail("bad".into()));
        assert!(!judge_prompt("x", &chat, 3).unwrap().valid);
    }

    #[test]
    fn consistency_prompt_carries_both_pairs() {
        let item = ConvBenchItem {
            video_id: "v".into(),
            question: "q1?".into(),
            reference_answer: "r".into(),
            model_answer: "a1".into(),
            metric: Metric::Consistency,
            question2: Some("q2?".into()),
            model_answer2: Some("a2".into()),
        };
        let p = conv_prompt(&item, &JudgeTemplates::default());
        assert!(p.contains("q1?") && p.contains("q2?") && p.contains("a1") && p.contains("a2"));
    }

    #[test]
    fn mock_judge_deterministic_and_in_range() {
        let m = MockBackend::new(7);
        let items: Vec<String> = (0..20).map(|i| format!("### task: judge_qa v1\nQuestion: {i}")).collect();
        let a = judge_all(&items, 4, |p| judge_prompt(p, &m, 1));
        let b = judge_all(&items, 1, |p| judge_prompt(p, &m, 1));
        assert_eq!(a.iter().map(|r| r.as_ref().unwrap().score).collect::<Vec<_>>(),
                   b.iter().map(|r| r.as_ref().unwrap().score).collect::<Vec<_>>());
        assert!(a.iter().all(|r| r.as_ref().unwrap().valid));
    }
}
