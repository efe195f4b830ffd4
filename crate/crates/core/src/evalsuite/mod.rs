//! Benchmarks: LLM-judged conversation and QA scoring, and spatial grounding
//! mean IoU.

mod judge;
mod report;
mod spatial;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backends::BackendError;
use crate::grounding::GroundingError;

pub use judge::{conv_prompt, judge_all, judge_item, judge_prompt, judge_qa_item, parse_verdict, JudgeTemplates};
pub use report::{render_report, render_table, BenchmarkReport, ReportError, BENCH_CONVERSATION, BENCH_GROUNDING, BENCH_QA};
pub use spatial::{
    dataset_score, eval_spatial_grounding, evaluate_grounding_item, mine_questions, parse_questions,
    select_interrogative, GroundingEvalContext, GroundingGtItem, GtFrame, ItemScore, QuestionScore,
};

/// Default total number of judge asks per item.
pub const DEFAULT_RETRIES: u32 = 3;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error("caption is empty")]
    EmptyCaption,
    #[error("invalid item: {0}")]
    InvalidItem(String),
    #[error("segment backend unreachable: {0}")]
    SegmentTransport(String),
}

impl EvalError {
    pub fn is_transport(&self) -> bool {
        match self {
            EvalError::Backend(b) | EvalError::Grounding(GroundingError::Backend(b)) => b.is_transport(),
            EvalError::SegmentTransport(_) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Correctness,
    Detail,
    Context,
    Temporal,
    Consistency,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Correctness,
        Metric::Detail,
        Metric::Context,
        Metric::Temporal,
        Metric::Consistency,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Correctness => "correctness",
            Metric::Detail => "detail",
            Metric::Context => "context",
            Metric::Temporal => "temporal",
            Metric::Consistency => "consistency",
        }
    }

    /// Column heading in the conversation table.
    pub fn title(self) -> &'static str {
        match self {
            Metric::Correctness => "Correctness",
            Metric::Detail => "Detail Orientation",
            Metric::Context => "Contextual Understanding",
            Metric::Temporal => "Temporal Understanding",
            Metric::Consistency => "Consistency",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pred {
    #[serde(rename = "yes")]
    Yes,
    #[serde(rename = "no")]
    No,
    #[serde(rename = "n/a")]
    NotApplicable,
}

impl Pred {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "yes" => Some(Pred::Yes),
            "no" => Some(Pred::No),
            "n/a" => Some(Pred::NotApplicable),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub pred: Pred,
    /// 1..=5 when valid.
    pub score: Option<u8>,
    pub raw: String,
    pub valid: bool,
}

impl JudgeVerdict {
    pub fn new(pred: Pred, score: u8) -> Self {
        assert!((1..=5).contains(&score), "judge score out of range: {score}");
        Self {
            pred,
            score: Some(score),
            raw: String::new(),
            valid: true,
        }
    }

    pub fn invalid(raw: impl Into<String>) -> Self {
        Self {
            pred: Pred::NotApplicable,
            score: None,
            raw: raw.into(),
            valid: false,
        }
    }
}

/// One line of a conversation benchmark dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBenchItem {
    pub video_id: String,
    pub question: String,
    pub reference_answer: String,
    pub model_answer: String,
    pub metric: Metric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question2: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_answer2: Option<String>,
}

impl ConvBenchItem {
    pub fn validate(&self) -> Result<(), EvalError> {
        let paired = self.question2.is_some() && self.model_answer2.is_some();
        match (self.metric, paired) {
            (Metric::Consistency, false) => Err(EvalError::InvalidItem(format!(
                "{}: consistency items need question2 and model_answer2",
                self.video_id
            ))),
            _ => Ok(()),
        }
    }
}

/// One line of a zero-shot QA dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaItem {
    pub video_id: String,
    /// Dataset name, e.g. `MSVD-QA`; one table column pair per dataset.
    pub dataset: String,
    pub question: String,
    pub reference_answer: String,
    pub model_answer: String,
}

/// Summary of one metric (or dataset). `count` is the number of items,
/// `invalid` those excluded from the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// `null` when nothing valid was scored.
    pub mean: Option<f64>,
    pub count: usize,
    pub invalid: usize,
    /// Fraction of valid verdicts with `pred = yes` (QA only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

impl MetricSummary {
    pub fn valid(&self) -> usize {
        self.count - self.invalid
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean score over valid verdicts; with `qa`, also the yes-fraction.
pub fn aggregate(verdicts: &[JudgeVerdict], qa: bool) -> MetricSummary {
    let valid: Vec<&JudgeVerdict> = verdicts.iter().filter(|v| v.valid).collect();
    let accuracy = if qa && !valid.is_empty() {
        Some(valid.iter().filter(|v| v.pred == Pred::Yes).count() as f64 / valid.len() as f64)
    } else {
        None
    };
    MetricSummary {
        mean: mean(valid.iter().filter_map(|v| v.score).map(f64::from)),
        count: verdicts.len(),
        invalid: verdicts.len() - valid.len(),
        accuracy,
    }
}

/// Per-metric summaries of a judged conversation run.
pub fn aggregate_conversation(items: &[ConvBenchItem], verdicts: &[JudgeVerdict]) -> BTreeMap<String, MetricSummary> {
    assert_eq!(items.len(), verdicts.len());
    Metric::ALL
        .iter()
        .filter_map(|&m| {
            let vs: Vec<JudgeVerdict> = items
                .iter()
                .zip(verdicts)
                .filter(|(i, _)| i.metric == m)
                .map(|(_, v)| v.clone())
                .collect();
            (!vs.is_empty()).then(|| (m.as_str().to_string(), aggregate(&vs, false)))
        })
        .collect()
}

/// Per-dataset summaries of a judged QA run.
pub fn aggregate_qa(items: &[QaItem], verdicts: &[JudgeVerdict]) -> BTreeMap<String, MetricSummary> {
    assert_eq!(items.len(), verdicts.len());
    let mut by_dataset: BTreeMap<String, Vec<JudgeVerdict>> = BTreeMap::new();
    for (i, v) in items.iter().zip(verdicts) {
        by_dataset.entry(i.dataset.clone()).or_default().push(v.clone());
    }
    by_dataset
        .into_iter()
        .map(|(d, vs)| (d, aggregate(&vs, true)))
        .collect()
}
