//! Class-agnostic greedy IoU tracker.

use serde::{Deserialize, Serialize};

use super::{iou, Detection, Observation, Track};

/// Detections of one processed (sampled) frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub frame_idx: usize,
    pub detections: Vec<Detection>,
}

struct Live {
    track: Track,
    missed: usize,
    tags: Vec<(String, usize)>,
}

impl Live {
    fn push(&mut self, d: &Detection) {
        self.track.observations.push(Observation {
            frame_idx: d.frame_idx,
            bbox: d.bbox,
            score: d.score,
            mask_rle: None,
            interpolated: false,
        });
        match self.tags.iter_mut().find(|(t, _)| *t == d.tag) {
            Some(c) => c.1 += 1,
            None => self.tags.push((d.tag.clone(), 1)),
        }
        self.missed = 0;
    }

    fn finish(mut self) -> Track {
        let top = self.tags.iter().map(|(_, n)| *n).max().unwrap_or(0);
        if let Some((t, _)) = self.tags.iter().find(|(_, n)| *n == top) {
            self.track.tag = t.clone();
        }
        self.track
    }
}

/// Frames must arrive in increasing `frame_idx` order. For each frame, every
/// (live track, detection) pair with IoU against the track's latest box at
/// least `iou_gate` is a candidate; candidates are taken greedily by IoU
/// (ties by track id, then detection order) with each side used once.
/// Leftover detections open new tracks in left-to-right box order. A track
/// that goes unmatched for more than `max_missed` consecutive processed
/// frames is closed.
pub fn associate_tracks(frames: &[FrameDetections], iou_gate: f64, max_missed: usize) -> Vec<Track> {
    let mut live: Vec<Live> = Vec::new();
    let mut done: Vec<Track> = Vec::new();
    let mut next_id = 0u64;

    for frame in frames {
        debug_assert!(
            live.iter().all(|l| l.track.last_frame() < frame.frame_idx),
            "frames must be processed in increasing order"
        );
        let dets = &frame.detections;
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (ti, l) in live.iter().enumerate() {
            let last = l.track.observations.last().expect("live track is non-empty").bbox;
            for (di, d) in dets.iter().enumerate() {
                let v = iou(&last, &d.bbox);
                if v >= iou_gate && v > 0.0 {
                    candidates.push((v, ti, di));
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(live[a.1].track.track_id.cmp(&live[b.1].track.track_id))
                .then(a.2.cmp(&b.2))
        });

        let mut track_used = vec![false; live.len()];
        let mut det_used = vec![false; dets.len()];
        for (_, ti, di) in candidates {
            if track_used[ti] || det_used[di] {
                continue;
            }
            track_used[ti] = true;
            det_used[di] = true;
            live[ti].push(&dets[di]);
        }

        let mut still_live = Vec::with_capacity(live.len());
        for (l, used) in live.into_iter().zip(track_used) {
            let mut l = l;
            if !used {
                l.missed += 1;
            }
            if l.missed > max_missed {
                done.push(l.finish());
            } else {
                still_live.push(l);
            }
        }
        live = still_live;

        let mut fresh: Vec<&Detection> = dets.iter().zip(&det_used).filter(|(_, u)| !**u).map(|(d, _)| d).collect();
        fresh.sort_by(|a, b| {
            a.bbox
                .x1
                .total_cmp(&b.bbox.x1)
                .then(a.bbox.y1.total_cmp(&b.bbox.y1))
                .then(a.bbox.x2.total_cmp(&b.bbox.x2))
                .then(a.bbox.y2.total_cmp(&b.bbox.y2))
                .then(b.score.total_cmp(&a.score))
        });
        for d in fresh {
            let mut l = Live {
                track: Track {
                    track_id: next_id,
                    tag: d.tag.clone(),
                    observations: Vec::new(),
                },
                missed: 0,
                tags: Vec::new(),
            };
            l.push(d);
            next_id += 1;
            live.push(l);
        }
    }

    done.extend(live.into_iter().map(Live::finish));
    done.sort_by_key(|t| t.track_id);
    done
}
