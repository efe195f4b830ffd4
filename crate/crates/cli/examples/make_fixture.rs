//! Regenerates `fixtures/` at the workspace root.
//!
//! ```text
//! cargo run -p groundvid-cli --example make_fixture
//! ```

use std::path::{Path, PathBuf};

use groundvid::backends::MOCK_VOCABULARY;
use groundvid::media::{encode_png, AudioTrack};
use image::{Rgb, RgbImage};
use serde_json::json;

const WIDTH: u32 = 64;
const HEIGHT: u32 = 48;
const FRAMES: usize = 60;
const FPS: f64 = 10.0;
const BALL: u32 = 10;

fn background(i: usize) -> [u8; 3] {
    match i {
        0..20 => [10, 10, 10],
        20..40 => [245, 245, 245],
        _ => [10, 10, 10],
    }
}

/// Ball box in frame `i` as `[x1, y1, x2, y2]`, half-open pixel extents.
fn ball_box(i: usize) -> [u32; 4] {
    let x = 4 + (i % 20) as u32 / 4;
    [x, 12, x + BALL, 12 + BALL]
}

fn frame(i: usize) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb(background(i)));
    let [x1, y1, x2, y2] = ball_box(i);
    for y in y1..y2 {
        for x in x1..x2 {
            img.put_pixel(x, y, Rgb(MOCK_VOCABULARY[0].1));
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

fn audio() -> AudioTrack {
    // speech-band, mid-band and music-band tones separated by silence
    let mut samples = vec![0i16; 8_000];
    for f in [300.0, 880.0, 2000.0] {
        samples.extend(tone(f, 1.0));
        samples.extend(vec![0i16; 16_000]);
    }
    samples.truncate((FRAMES as f64 / FPS * 16_000.0) as usize);
    AudioTrack { samples }
}

fn jsonl(path: &Path, rows: &[serde_json::Value]) {
    let text: String = rows.iter().map(|r| format!("{r}\n")).collect();
    std::fs::write(path, text).unwrap();
}

fn gt_frames(frames: impl Iterator<Item = usize>) -> Vec<serde_json::Value> {
    frames
        .map(|i| {
            let [x1, y1, x2, y2] = ball_box(i);
            json!({"frame_idx": i, "box": [x1, y1, x2, y2]})
        })
        .collect()
}

fn main() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    let clip = root.join("videos/clip01");
    std::fs::create_dir_all(&clip).unwrap();
    for i in 0..FRAMES {
        std::fs::write(clip.join(format!("{i:03}.png")), encode_png(&frame(i)).unwrap()).unwrap();
    }
    std::fs::write(clip.join("meta.json"), format!("{}\n", json!({"fps": FPS}))).unwrap();
    std::fs::write(clip.join("audio.wav"), audio().to_wav_bytes().unwrap()).unwrap();

    let data = root.join("datasets");
    std::fs::create_dir_all(&data).unwrap();
    jsonl(
        &data.join("grounding.jsonl"),
        &[
            json!({
                "video_id": "clip01",
                "dataset": "vidstg",
                "prompt": "Where is the red ball?",
                "prompt_type": "interrogative",
                "frames": gt_frames((0..FRAMES).step_by(5)),
            }),
            json!({
                "video_id": "clip01",
                "dataset": "vidstg",
                "prompt": "The ball rolls to the right.",
                "prompt_type": "declarative",
                "frames": gt_frames([0, 10].into_iter()),
            }),
            json!({
                "video_id": "clip01",
                "dataset": "hc-stvg",
                "caption": "A red ball rolls across the floor while the light changes.",
                "frames": gt_frames((20..40).step_by(2)),
            }),
        ],
    );

    let answer = "A red ball rolls to the right.";
    let mut conv = Vec::new();
    for metric in ["correctness", "detail", "context", "temporal"] {
        conv.push(json!({
            "video_id": "clip01",
            "question": "What happens in the video?",
            "reference_answer": "A red ball rolls across the frame.",
            "model_answer": answer,
            "metric": metric,
        }));
    }
    conv.push(json!({
        "video_id": "clip01",
        "question": "What moves in the video?",
        "question2": "Which object rolls?",
        "reference_answer": "A red ball.",
        "model_answer": answer,
        "model_answer2": "The ball.",
        "metric": "consistency",
    }));
    jsonl(&data.join("conv.jsonl"), &conv);

    let qa: Vec<_> = ["MSVD-QA", "MSRVTT-QA", "TGIF-QA", "ActivityNet-QA"]
        .iter()
        .flat_map(|d| {
            [("what color is the ball", "red", "red"), ("what rolls", "ball", "a car")].map(|(q, r, a)| {
                json!({"video_id": "clip01", "dataset": d, "question": q, "reference_answer": r, "model_answer": a})
            })
        })
        .collect();
    jsonl(&data.join("qa.jsonl"), &qa);
    println!("wrote {}", root.display());
}
