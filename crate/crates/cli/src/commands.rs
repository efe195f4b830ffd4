use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use groundvid::audio::{build_prompt, transcribe as transcribe_track, transcript_from_records, TranscriptRecord};
use groundvid::backends::{Backend, BackendExt, EndpointKind};
use groundvid::cache::{from_jsonl, to_jsonl};
use groundvid::digest::{json_digest, sha256_hex};
use groundvid::evalsuite::{
    aggregate_conversation, aggregate_qa, dataset_score, evaluate_grounding_item, judge_all, judge_item,
    judge_qa_item, render_report, BenchmarkReport, ConvBenchItem, EvalError, GroundingEvalContext,
    GroundingGtItem, ItemScore, JudgeTemplates, JudgeVerdict, MetricSummary, QaItem, BENCH_CONVERSATION,
    BENCH_GROUNDING, BENCH_QA,
};

use groundvid::features::{
    assemble_video_feature, project_features, read_container, write_container, TensorContainer, spatial_pool, temporal_pool, uniform_frame_indices, FrameFeatureTensor,
    Projector,
};
use groundvid::grounding::{ground_video, GroundingError, GroundingTemplates};
use groundvid::ingest::{ingest, Video};
use groundvid::par::parallel_map;
use groundvid::scenes::{detect_scenes, SceneRecord, SceneSegment};
use serde::{Deserialize, Serialize};

use crate::context::{video_digest, CliError, Context};
use crate::JudgeArgs;

const VIDEO_TOKEN: &str = "<video>";

fn load_video(path: &Path) -> Result<Video, CliError> {
    ingest(path, &[]).map_err(CliError::pipeline)
}

fn video_key(v: &Video) -> String {
    sha256_hex(format!("{}\n{}", v.meta.video_id, video_digest(v)).as_bytes())
}

fn require_inputs(paths: &[PathBuf]) -> Result<(), CliError> {
    if paths.is_empty() {
        return Err(CliError::Usage("at least one input is required".into()));
    }
    Ok(())
}

fn read_dataset<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Pipeline(format!("{}: {e}", path.display())))?;
    from_jsonl(&text).map_err(|e| CliError::Pipeline(format!("{}: {e}", path.display())))
}

fn cached_json<T, F>(ctx: &Context, stage: &str, input: &str, compute: F) -> Result<T, CliError>
where
    T: Serialize + for<'de> Deserialize<'de>,
    F: FnOnce() -> Result<T, CliError>,
{
    let (bytes, _) = ctx.cache.get_or_compute(stage, input, &ctx.config_hash, || {
        compute().map(|v| serde_json::to_vec(&v).expect("serializable stage output"))
    })?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Pipeline(format!("cache entry for {stage}: {e}")))
}

fn video_scenes(ctx: &Context, v: &Video) -> Result<Vec<SceneSegment>, CliError> {
    cached_json(ctx, "scenes", &video_key(v), || {
        detect_scenes(&v.frames, ctx.config.scenes.threshold, ctx.config.scenes.min_len).map_err(CliError::pipeline)
    })
}

fn video_transcript(ctx: &Context, v: &Video) -> Result<Vec<TranscriptRecord>, CliError> {
    cached_json(ctx, "transcribe", &video_key(v), || {
        Ok(transcribe_track(&v.meta.video_id, &v.audio, ctx.backend.as_ref(), &ctx.config.audio, ctx.workers)?)
    })
}

fn inputs_of(videos: &[Video]) -> BTreeMap<String, String> {
    videos.iter().map(|v| (v.meta.video_id.clone(), video_key(v))).collect()
}

pub fn scenes(ctx: &Context, paths: &[PathBuf]) -> Result<(), CliError> {
    require_inputs(paths)?;
    let videos = paths.iter().map(|p| load_video(p)).collect::<Result<Vec<_>, _>>()?;
    let per_video = parallel_map(&videos, ctx.workers, |_, v| {
        let segs = video_scenes(ctx, v)?;
        Ok(segs
            .into_iter()
            .map(|s| SceneRecord::new(&v.meta.video_id, s, v.frames.fps()))
            .collect::<Vec<_>>())
    });
    let records: Vec<SceneRecord> = per_video
        .into_iter()
        .collect::<Result<Vec<_>, CliError>>()?
        .into_iter()
        .flatten()
        .collect();
    let out = ctx.out_or("scenes.jsonl");
    ctx.write_artifact(&out, &to_jsonl(&records), "scenes", inputs_of(&videos), "none".into(), vec![])
}

pub fn transcribe(ctx: &Context, paths: &[PathBuf]) -> Result<(), CliError> {
    require_inputs(paths)?;
    let videos = paths.iter().map(|p| load_video(p)).collect::<Result<Vec<_>, _>>()?;
    let per_video = parallel_map(&videos, ctx.workers, |_, v| video_transcript(ctx, v));
    let records: Vec<TranscriptRecord> = per_video
        .into_iter()
        .collect::<Result<Vec<_>, CliError>>()?
        .into_iter()
        .flatten()
        .collect();
    let out = ctx.out_or("transcript.jsonl");
    let backend = ctx.backend_label(&[EndpointKind::Vad, EndpointKind::Asr, EndpointKind::AudioTag]);
    ctx.write_artifact(&out, &to_jsonl(&records), "transcribe", inputs_of(&videos), backend, vec![])
}

fn grounding_templates(ctx: &Context) -> Result<GroundingTemplates, CliError> {
    Ok(GroundingTemplates {
        noun_phrases: ctx.template("noun_phrases")?,
        entity_match: ctx.template("entity_match")?,
    })
}

fn grounding_error(e: GroundingError) -> CliError {
    match e {
        GroundingError::Backend(b) => b.into(),
        other => CliError::pipeline(other),
    }
}

#[derive(Serialize, Deserialize)]
struct GroundStage {
    jsonl: String,
    failures: Vec<String>,
    transport_failure: bool,
}

pub fn ground(ctx: &Context, path: &Path, response: Option<&str>, instruction: &str) -> Result<(), CliError> {
    let video = load_video(path)?;
    let scenes = video_scenes(ctx, &video)?;
    let response = match response {
        Some(r) => r.to_string(),
        None => {
            let transcript = transcript_from_records(&video_transcript(ctx, &video)?);
            let prompt = build_prompt(&ctx.template("conversation")?, &transcript, instruction, VIDEO_TOKEN)
                .map_err(CliError::pipeline)?;
            ctx.backend.chat(&prompt, 512)?
        }
    };
    let input = sha256_hex(format!("{}\n{}", video_key(&video), response).as_bytes());
    let compute = || -> Result<GroundStage, CliError> {
        let out = ground_video(
            &video.frames,
            &scenes,
            &response,
            ctx.backend.as_ref(),
            &ctx.config.grounding,
            &grounding_templates(ctx)?,
            ctx.workers,
        )
        .map_err(grounding_error)?;
        Ok(GroundStage {
            jsonl: String::from_utf8(to_jsonl(&out.records(&video.meta.video_id))).expect("JSON is UTF-8"),
            failures: out
                .failures
                .iter()
                .map(|f| format!("segment [{}, {}): {}", f.segment.start_frame, f.segment.end_frame, f.error))
                .collect(),
            transport_failure: out.failures.iter().any(|f| f.transport),
        })
    };
    // partial results are not cached; a later run may reach the backends
    let stage = match ctx.cache.get("ground", &input, &ctx.config_hash) {
        (groundvid::cache::Lookup::Hit, Some(b)) => {
            serde_json::from_slice(&b).map_err(|e| CliError::Pipeline(format!("cache entry for ground: {e}")))?
        }
        _ => {
            let s = compute()?;
            if s.failures.is_empty() {
                ctx.cache.put("ground", &input, &ctx.config_hash, &serde_json::to_vec(&s).expect("serializable"))?;
            }
            s
        }
    };

    let out = ctx.out_or("tracks.jsonl");
    let mut inputs = inputs_of(std::slice::from_ref(&video));
    inputs.insert("response".into(), sha256_hex(response.as_bytes()));
    let backend = ctx.backend_label(&[
        EndpointKind::TagImage,
        EndpointKind::Detect,
        EndpointKind::EmbedImage,
        EndpointKind::EmbedText,
        EndpointKind::Chat,
    ]);
    ctx.write_artifact(&out, stage.jsonl.as_bytes(), "ground", inputs, backend, stage.failures.clone())?;
    if stage.transport_failure {
        return Err(CliError::Transport(stage.failures.join("; ")));
    }
    if !stage.failures.is_empty() {
        log::warn!("{} segment(s) failed: {}", stage.failures.len(), stage.failures.join("; "));
    }
    Ok(())
}

fn judge_templates(ctx: &Context) -> Result<JudgeTemplates, CliError> {
    Ok(JudgeTemplates {
        correctness: ctx.template("judge_correctness")?,
        detail: ctx.template("judge_detail")?,
        context: ctx.template("judge_context")?,
        temporal: ctx.template("judge_temporal")?,
        consistency: ctx.template("judge_consistency")?,
        qa: ctx.template("judge_qa")?,
    })
}

struct JudgeSettings {
    retries: u32,
    max_in_flight: usize,
}

fn judge_settings(ctx: &Context, args: &JudgeArgs) -> Result<JudgeSettings, CliError> {
    let s = JudgeSettings {
        retries: args.retries.unwrap_or(ctx.config.eval.retries),
        max_in_flight: args.max_in_flight.unwrap_or(ctx.config.eval.max_in_flight),
    };
    if s.retries == 0 || s.max_in_flight == 0 {
        return Err(CliError::Usage("--retries and --max-in-flight must be at least 1".into()));
    }
    Ok(s)
}

/// Verdicts with transport failures turned into invalid ones, plus the
/// first transport failure if there was one.
fn settle(results: Vec<Result<JudgeVerdict, groundvid::backends::BackendError>>) -> (Vec<JudgeVerdict>, Option<String>) {
    let mut transport = None;
    let verdicts = results
        .into_iter()
        .map(|r| match r {
            Ok(v) => v,
            Err(e) => {
                transport.get_or_insert_with(|| e.to_string());
                JudgeVerdict::invalid(e.to_string())
            }
        })
        .collect();
    (verdicts, transport)
}

#[derive(Serialize)]
struct VerdictRecord<'a> {
    video_id: &'a str,
    metric: &'a str,
    #[serde(flatten)]
    verdict: &'a JudgeVerdict,
}

fn sidecar(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    out.with_file_name(name)
}

#[allow(clippy::too_many_arguments)]
fn write_report(
    ctx: &Context,
    out: &Path,
    report: &BenchmarkReport,
    dataset: &Path,
    items_jsonl: Vec<u8>,
    stage: &str,
    backend: String,
    failures: Vec<String>,
) -> Result<(), CliError> {
    let data = std::fs::read(dataset)?;
    let mut inputs = BTreeMap::new();
    inputs.insert(dataset.display().to_string(), sha256_hex(&data));
    ctx.write_artifact(&sidecar(out, ".items.jsonl"), &items_jsonl, stage, inputs.clone(), backend.clone(), vec![])?;
    let mut bytes = serde_json::to_vec_pretty(report).expect("serializable report");
    bytes.push(b'\n');
    ctx.write_artifact(out, &bytes, stage, inputs, backend, failures)
}

fn judge_report(
    ctx: &Context,
    bench: &str,
    judge: &dyn Backend,
    used: &[&groundvid::templates::Template],
    settings: &JudgeSettings,
    metrics: BTreeMap<String, MetricSummary>,
) -> BenchmarkReport {
    let hashes = used.iter().map(|t| (t.name().to_string(), t.hash())).collect();
    let mut report = BenchmarkReport::new(bench, judge.name(EndpointKind::Chat), ctx.config_hash.clone(), hashes, metrics);
    report.settings.insert("retries".into(), settings.retries.into());
    report.settings.insert("max_in_flight".into(), settings.max_in_flight.into());
    report.settings.insert("seed".into(), ctx.config.seed.into());
    report
}

pub fn eval_conv(ctx: &Context, dataset: &Path, args: &JudgeArgs) -> Result<(), CliError> {
    let items: Vec<ConvBenchItem> = read_dataset(dataset)?;
    for i in &items {
        i.validate().map_err(CliError::pipeline)?;
    }
    let settings = judge_settings(ctx, args)?;
    let judge = ctx.judge_backend(args);
    let templates = judge_templates(ctx)?;
    let results = judge_all(&items, settings.max_in_flight, |it| {
        judge_item(it, judge.as_ref(), &templates, settings.retries)
    });
    let (verdicts, transport) = settle(results);
    let metrics = aggregate_conversation(&items, &verdicts);
    let used = [&templates.correctness, &templates.detail, &templates.context, &templates.temporal, &templates.consistency];
    let report = judge_report(ctx, BENCH_CONVERSATION, judge.as_ref(), &used, &settings, metrics);
    let records: Vec<VerdictRecord> = items
        .iter()
        .zip(&verdicts)
        .map(|(i, v)| VerdictRecord { video_id: &i.video_id, metric: i.metric.as_str(), verdict: v })
        .collect();
    let out = ctx.out_or("conv_report.json");
    let failures = transport.iter().cloned().collect();
    write_report(ctx, &out, &report, dataset, to_jsonl(&records), "eval-conv", judge.name(EndpointKind::Chat), failures)?;
    transport.map_or(Ok(()), |t| Err(CliError::Transport(t)))
}

pub fn eval_qa(ctx: &Context, dataset: &Path, args: &JudgeArgs) -> Result<(), CliError> {
    let items: Vec<QaItem> = read_dataset(dataset)?;
    let settings = judge_settings(ctx, args)?;
    let judge = ctx.judge_backend(args);
    let template = ctx.template("judge_qa")?;
    let results = judge_all(&items, settings.max_in_flight, |it| {
        judge_qa_item(it, judge.as_ref(), &template, settings.retries)
    });
    let (verdicts, transport) = settle(results);
    let metrics = aggregate_qa(&items, &verdicts);
    let report = judge_report(ctx, BENCH_QA, judge.as_ref(), &[&template], &settings, metrics);
    let records: Vec<VerdictRecord> = items
        .iter()
        .zip(&verdicts)
        .map(|(i, v)| VerdictRecord { video_id: &i.video_id, metric: &i.dataset, verdict: v })
        .collect();
    let out = ctx.out_or("qa_report.json");
    let failures = transport.iter().cloned().collect();
    write_report(ctx, &out, &report, dataset, to_jsonl(&records), "eval-qa", judge.name(EndpointKind::Chat), failures)?;
    transport.map_or(Ok(()), |t| Err(CliError::Transport(t)))
}

pub fn eval_grounding(ctx: &Context, dataset: &Path, videos_dir: &Path, args: &JudgeArgs) -> Result<(), CliError> {
    let items: Vec<GroundingGtItem> = read_dataset(dataset)?;
    for i in &items {
        i.validate().map_err(CliError::pipeline)?;
    }
    let mut videos: BTreeMap<String, (Video, Vec<SceneSegment>)> = BTreeMap::new();
    for i in &items {
        if !videos.contains_key(&i.video_id) {
            let v = load_video(&videos_dir.join(&i.video_id))?;
            let s = video_scenes(ctx, &v)?;
            videos.insert(i.video_id.clone(), (v, s));
        }
    }

    let backend = ctx.judge_backend(args);
    let grounding_templates = grounding_templates(ctx)?;
    let answer = ctx.template("answer")?;
    let mine = ctx.template("mine_questions")?;
    let gctx = GroundingEvalContext {
        backend: backend.as_ref(),
        options: &ctx.config.grounding,
        grounding_templates: &grounding_templates,
        answer_template: &answer,
        mine_template: &mine,
        workers: 1,
    };
    let results = parallel_map(&items, ctx.workers, |_, item| {
        let (v, s) = &videos[&item.video_id];
        evaluate_grounding_item(item, &v.frames, s, &gctx)
    });

    let mut scores: Vec<ItemScore> = Vec::new();
    let mut transport = None;
    for (item, r) in items.iter().zip(results) {
        match r {
            Ok(s) => scores.push(s),
            Err(e) if e.is_transport() => {
                transport.get_or_insert_with(|| e.to_string());
                scores.push(ItemScore {
                    video_id: item.video_id.clone(),
                    dataset: item.dataset.clone(),
                    score: None,
                    questions: vec![],
                    failed_segments: 0,
                });
            }
            Err(EvalError::Backend(b)) => return Err(b.into()),
            Err(e) => return Err(CliError::pipeline(e)),
        }
    }

    let mut metrics = BTreeMap::new();
    let mut by_dataset: BTreeMap<&str, Vec<&ItemScore>> = BTreeMap::new();
    for s in &scores {
        by_dataset.entry(s.dataset.as_str()).or_default().push(s);
    }
    for (d, ss) in by_dataset {
        let valid: Vec<f64> = ss.iter().filter_map(|s| s.score).collect();
        metrics.insert(
            d.to_string(),
            MetricSummary { mean: dataset_score(&valid), count: ss.len(), invalid: ss.len() - valid.len(), accuracy: None },
        );
    }
    let used = [&grounding_templates.noun_phrases, &grounding_templates.entity_match, &answer, &mine];
    let hashes = used.iter().map(|t| (t.name().to_string(), t.hash())).collect();
    let mut report = BenchmarkReport::new(
        BENCH_GROUNDING,
        backend.name(EndpointKind::Chat),
        ctx.config_hash.clone(),
        hashes,
        metrics,
    );
    let g = &ctx.config.grounding;
    report.settings = serde_json::from_value(serde_json::json!({
        "iou_gate": g.iou_gate,
        "max_missed": g.max_missed,
        "sim_floor": g.sim_floor,
        "matcher": g.matcher,
        "masks": g.masks,
        "samples_per_second": g.samples_per_second,
        "scene_threshold": ctx.config.scenes.threshold,
        "scene_min_len": ctx.config.scenes.min_len,
        "seed": ctx.config.seed,
    }))
    .expect("settings object");

    let out = ctx.out_or("grounding_report.json");
    let label = ctx.backend_label(&[EndpointKind::TagImage, EndpointKind::Detect, EndpointKind::EmbedImage, EndpointKind::Chat]);
    let failures = transport.iter().cloned().collect();
    write_report(ctx, &out, &report, dataset, to_jsonl(&scores), "eval-grounding", label, failures)?;
    transport.map_or(Ok(()), |t| Err(CliError::Transport(t)))
}

pub fn report(ctx: &Context, paths: &[PathBuf]) -> Result<(), CliError> {
    require_inputs(paths)?;
    let mut reports = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Pipeline(format!("{}: {e}", p.display())))?;
        let r: BenchmarkReport =
            serde_json::from_str(&text).map_err(|e| CliError::Pipeline(format!("{}: {e}", p.display())))?;
        let label = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        reports.push((label, r));
    }
    let text = render_report(&reports).map_err(CliError::pipeline)?;
    print!("{text}");
    if let Some(out) = &ctx.out {
        let inputs = reports.iter().map(|(l, r)| (l.clone(), json_digest(r))).collect();
        ctx.write_artifact(out, text.as_bytes(), "report", inputs, "none".into(), vec![])?;
    }
    Ok(())
}

pub fn features(ctx: &Context, input: &Path, projector: Option<&Path>) -> Result<(), CliError> {
    let read = |p: &Path| -> Result<TensorContainer, CliError> {
        let f = std::fs::File::open(p).map_err(|e| CliError::Pipeline(format!("{}: {e}", p.display())))?;
        read_container(std::io::BufReader::new(f)).map_err(|e| CliError::Pipeline(format!("{}: {e}", p.display())))
    };
    let x = FrameFeatureTensor::try_from(&read(input)?).map_err(CliError::pipeline)?;
    let keep = uniform_frame_indices(x.frames(), ctx.config.features.frame_count);
    let x = if keep.len() < x.frames() {
        let data = x.data().select(ndarray::Axis(0), &keep);
        FrameFeatureTensor::new(data, x.grid(), x.patch_size()).map_err(CliError::pipeline)?
    } else {
        x
    };
    let v = assemble_video_feature(&temporal_pool(&x), &spatial_pool(&x)).map_err(CliError::pipeline)?;
    let container = match projector {
        Some(p) => {
            let g = Projector::try_from(&read(p)?).map_err(CliError::pipeline)?;
            TensorContainer::from(&project_features(&v, &g).map_err(CliError::pipeline)?)
        }
        None => TensorContainer::from(&v),
    };
    let mut bytes = Vec::new();
    write_container(&mut bytes, &container).map_err(CliError::pipeline)?;
    let mut inputs = BTreeMap::new();
    inputs.insert(input.display().to_string(), sha256_hex(&std::fs::read(input)?));
    if let Some(p) = projector {
        inputs.insert(p.display().to_string(), sha256_hex(&std::fs::read(p)?));
    }
    ctx.write_artifact(&ctx.out_or("features.bin"), &bytes, "features", inputs, "none".into(), vec![])
}
