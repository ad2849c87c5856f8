//! Synthetic long-video generator with planted events, query generation
//! over the event list, and the versioned dataset container.
//!
//! A "video" is a stream of per-frame token blocks. Noise tokens are unit
//! Gaussian; while an event `(activity, object, interval, box track)` is
//! active, the grid cells covered by its box additionally carry
//! `snr * (signature(object) + signature(activity))`. Signatures are fixed
//! random unit vectors shared by every video of a dataset, so models can
//! generalize from train videos to held-out ones.
//!
//! All stored floating payloads are quantized to f32 at generation time;
//! the dataset file stores little-endian f32 tokens and round-trips
//! bit-exactly.

use ndarray::{s, Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::seeds;
use crate::types::{
    sample_frame_times, validate_query, DurationClass, ModelConfig, NormBox, QueryKind, RestQuery,
    TimeInterval, TokenBlock, TokenProv,
};

/// Quantize through f32 so binary storage is lossless.
fn q32(x: f64) -> f64 {
    x as f32 as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One planted event: an activity performed on an object over an interval,
/// with a piecewise-linear normalized box track between keyframes.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub activity_class: usize,
    pub object_id: usize,
    pub interval: TimeInterval,
    /// `(time, box)` keyframes; sorted, first at interval start, last at end.
    pub keyframes: Vec<(f64, NormBox)>,
}

impl Event {
    /// Box position at time `t` (clamped to the track's span).
    pub fn box_at(&self, t: f64) -> NormBox {
        let kfs = &self.keyframes;
        if t <= kfs[0].0 {
            return kfs[0].1;
        }
        if t >= kfs[kfs.len() - 1].0 {
            return kfs[kfs.len() - 1].1;
        }
        let i = kfs.partition_point(|(kt, _)| *kt <= t).min(kfs.len() - 1);
        let (t0, b0) = kfs[i - 1];
        let (t1, b1) = kfs[i];
        let a = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
        NormBox::new(
            b0.cx + a * (b1.cx - b0.cx),
            b0.cy + a * (b1.cy - b0.cy),
            b0.w + a * (b1.w - b0.w),
            b0.h + a * (b1.h - b0.h),
        )
    }

    /// Grid cells (row-major) with positive-area overlap with the box at `t`.
    pub fn covered_cells(&self, t: f64, grid_h: usize, grid_w: usize) -> Vec<usize> {
        let b = self.box_at(t);
        let [x1, y1, x2, y2] = b.corners();
        let mut cells = Vec::new();
        for r in 0..grid_h {
            for c in 0..grid_w {
                let cy0 = r as f64 / grid_h as f64;
                let cy1 = (r + 1) as f64 / grid_h as f64;
                let cx0 = c as f64 / grid_w as f64;
                let cx1 = (c + 1) as f64 / grid_w as f64;
                if x1 < cx1 && x2 > cx0 && y1 < cy1 && y2 > cy0 {
                    cells.push(r * grid_w + c);
                }
            }
        }
        cells
    }

    /// Whether the event's spatio-temporal extent contains `(time, cell)`.
    pub fn covers(&self, t: f64, cell: usize, grid_h: usize, grid_w: usize) -> bool {
        self.interval.contains_time(t) && self.covered_cells(t, grid_h, grid_w).contains(&cell)
    }
}

/// Fixed per-object and per-activity signature vectors, shared dataset-wide.
#[derive(Debug, Clone, PartialEq)]
pub struct SignatureBank {
    pub object: Vec<Array1<f64>>,
    pub activity: Vec<Array1<f64>>,
    pub snr: f64,
}

impl SignatureBank {
    /// Draw unit signature vectors for every object and activity from the
    /// root seed.
    ///
    /// Each signature mixes a dataset-wide "presence" direction (weight 0.7)
    /// with an identity-specific random direction before normalization. The
    /// shared component keeps event tokens linearly separable from noise at
    /// the configured snr while identities stay mutually distinguishable.
    pub fn generate(mc: &ModelConfig, seed: u64, snr: f64) -> Self {
        let presence = {
            let mut rng = seeds::rng(seed, seeds::STREAM_SIGNATURES, u64::MAX);
            let mut v = Array1::from_shape_fn(mc.d, |_| rng.gen_range(-1.0..1.0f64));
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.mapv_inplace(|x| x / norm);
            v
        };
        let draw = |item: u64| {
            let mut rng = seeds::rng(seed, seeds::STREAM_SIGNATURES, item);
            let mut v = Array1::from_shape_fn(mc.d, |_| rng.gen_range(-1.0..1.0f64));
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.mapv_inplace(|x| x / norm);
            let mut mixed = 0.7 * &presence + &v;
            let norm = mixed.iter().map(|x| x * x).sum::<f64>().sqrt();
            mixed.mapv_inplace(|x| q32(x / norm));
            mixed
        };
        SignatureBank {
            object: (0..mc.num_objects).map(|i| draw(i as u64)).collect(),
            activity: (0..mc.c_classes).map(|i| draw(1000 + i as u64)).collect(),
            snr,
        }
    }
}

/// A generated long video: token stream, planted events, grid geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub video_id: String,
    pub split: Split,
    pub duration: f64,
    pub fps: f64,
    /// Frame-major raw tokens, `(frame_count * s) x d`.
    pub tokens: Array2<f64>,
    pub events: Vec<Event>,
    pub s: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl SyntheticVideo {
    pub fn frame_count(&self) -> usize {
        (self.duration * self.fps + 1e-9).floor() as usize + 1
    }

    pub fn total_tokens(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn frame_time(&self, frame: usize) -> f64 {
        frame as f64 / self.fps
    }

    /// Raw (un-embedded) token block for one frame, provenance attached.
    pub fn frame_block(&self, frame: usize) -> TokenBlock {
        let start = frame * self.s;
        let data = self.tokens.slice(s![start..start + self.s, ..]).to_owned();
        let prov = (0..self.s)
            .map(|c| TokenProv {
                frame_index: frame as u32,
                spatial_cell: c as u32,
                video_time: self.frame_time(frame),
            })
            .collect();
        TokenBlock::new(self.video_id.clone(), data, prov)
    }

    /// Raw token block covering frames `[start, end)`.
    pub fn frames_block(&self, start: usize, end: usize) -> TokenBlock {
        let blocks: Vec<TokenBlock> = (start..end).map(|f| self.frame_block(f)).collect();
        let refs: Vec<&TokenBlock> = blocks.iter().collect();
        TokenBlock::concat(&refs)
    }
}

/// Generate one video with `num_events` planted events.
///
/// Deterministic per `(bank, seed)`. Events of the same object never share a
/// `(frame, cell)` pair; placement retries a bounded number of times before
/// failing.
pub fn generate_video(
    mc: &ModelConfig,
    bank: &SignatureBank,
    video_id: impl Into<String>,
    split: Split,
    seed: u64,
    duration: f64,
    num_events: usize,
) -> Result<SyntheticVideo> {
    assert!(duration > 0.0);
    let video_id = video_id.into();
    let fps = mc.fps_default;
    let frames = (duration * fps + 1e-9).floor() as usize + 1;
    let mut noise_rng = seeds::rng(seed, seeds::STREAM_NOISE, 0);
    let mut tokens = Array2::from_shape_fn((frames * mc.s, mc.d), |_| {
        let u1: f64 = noise_rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = noise_rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    });

    let mut event_rng = seeds::rng(seed, seeds::STREAM_EVENTS, 0);
    let mut events: Vec<Event> = Vec::with_capacity(num_events);
    // (frame, cell) footprints per object, for the no-collision rule.
    let mut occupied: Vec<std::collections::BTreeSet<(usize, usize)>> =
        vec![Default::default(); mc.num_objects];
    const MAX_RETRIES: usize = 200;
    for _ in 0..num_events {
        let mut placed = false;
        for attempt in 0..MAX_RETRIES {
            let object_id = event_rng.gen_range(0..mc.num_objects);
            let activity_class = event_rng.gen_range(0..mc.c_classes);
            let max_len = (duration * 0.15).min(90.0).max(4.0_f64.min(duration / 2.0));
            let min_len = (max_len * 0.4).max(2.0_f64.min(duration / 4.0));
            let len = event_rng.gen_range(min_len..=max_len);
            let start = event_rng.gen_range(0.0..=(duration - len));
            let interval = TimeInterval::new(start, start + len)?;
            let n_kf = event_rng.gen_range(2..=4usize);
            let mut kf_times: Vec<f64> = vec![interval.start, interval.end];
            for _ in 0..n_kf - 2 {
                kf_times.push(event_rng.gen_range(interval.start..=interval.end));
            }
            kf_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let keyframes = kf_times
                .into_iter()
                .map(|t| {
                    let w = event_rng.gen_range(0.2..0.45);
                    let h = event_rng.gen_range(0.2..0.45);
                    let cx = event_rng.gen_range(w / 2.0..=1.0 - w / 2.0);
                    let cy = event_rng.gen_range(h / 2.0..=1.0 - h / 2.0);
                    (t, NormBox::new(q32(cx), q32(cy), q32(w), q32(h)))
                })
                .collect();
            let ev = Event {
                activity_class,
                object_id,
                interval,
                keyframes,
            };
            let footprint = event_footprint(&ev, fps, frames, mc.grid_h, mc.grid_w);
            if footprint.iter().any(|fc| occupied[object_id].contains(fc)) {
                if attempt + 1 == MAX_RETRIES {
                    return Err(Error::EventPlacement {
                        retries: MAX_RETRIES,
                    });
                }
                continue;
            }
            occupied[object_id].extend(footprint.iter().copied());
            events.push(ev);
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::EventPlacement {
                retries: MAX_RETRIES,
            });
        }
    }
    // Stable order regardless of placement retries.
    events.sort_by(|a, b| {
        a.interval
            .start
            .partial_cmp(&b.interval.start)
            .unwrap()
            .then(a.object_id.cmp(&b.object_id))
            .then(a.activity_class.cmp(&b.activity_class))
    });

    // Plant signals.
    for ev in &events {
        let sig = bank.snr * (&bank.object[ev.object_id] + &bank.activity[ev.activity_class]);
        for f in 0..frames {
            let t = f as f64 / fps;
            if !ev.interval.contains_time(t) {
                continue;
            }
            for cell in ev.covered_cells(t, mc.grid_h, mc.grid_w) {
                let mut row = tokens.row_mut(f * mc.s + cell);
                row += &sig;
            }
        }
    }
    tokens.mapv_inplace(q32);

    Ok(SyntheticVideo {
        video_id,
        split,
        duration,
        fps,
        tokens,
        events,
        s: mc.s,
        grid_h: mc.grid_h,
        grid_w: mc.grid_w,
    })
}

fn event_footprint(
    ev: &Event,
    fps: f64,
    frames: usize,
    grid_h: usize,
    grid_w: usize,
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for f in 0..frames {
        let t = f as f64 / fps;
        if ev.interval.contains_time(t) {
            for cell in ev.covered_cells(t, grid_h, grid_w) {
                out.push((f, cell));
            }
        }
    }
    out
}

/// Multi-hot vector of activities performed on `object_id` with
/// positive-length overlap of `window`.
pub fn activities_of_object(
    video: &SyntheticVideo,
    object_id: usize,
    window: &TimeInterval,
    c_classes: usize,
) -> Vec<u8> {
    let mut v = vec![0u8; c_classes];
    for ev in &video.events {
        if ev.object_id != object_id {
            continue;
        }
        if let Some(inter) = ev.interval.intersect(window) {
            if inter.duration() > 0.0 {
                v[ev.activity_class] = 1;
            }
        }
    }
    v
}

/// Synthetic object patch: `s` tokens of `snr * signature(object) + noise`.
pub fn object_patch(
    mc: &ModelConfig,
    bank: &SignatureBank,
    video_id: &str,
    object_id: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> TokenBlock {
    let sig = &bank.object[object_id];
    let data = Array2::from_shape_fn((mc.s, mc.d), |(_, j)| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        let noise = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        q32(bank.snr * sig[j] + noise)
    });
    let prov = (0..mc.s)
        .map(|c| TokenProv {
            frame_index: 0,
            spatial_cell: c as u32,
            video_time: -1.0,
        })
        .collect();
    TokenBlock::new(video_id, data, prov)
}

/// Requested query counts for one video.
pub type QueryMix = Vec<(QueryKind, DurationClass, usize)>;

/// The standard mix: `per_kind` queries per kind, split across duration
/// classes as evenly as possible.
pub fn standard_mix(per_kind: usize) -> QueryMix {
    let kinds = [QueryKind::Activity, QueryKind::Object, QueryKind::Time];
    let classes = DurationClass::all();
    let mut mix = Vec::new();
    for k in kinds {
        let base = per_kind / 3;
        let rem = per_kind % 3;
        for (i, c) in classes.iter().enumerate() {
            let extra = usize::from(i < rem);
            mix.push((k, *c, base + extra));
        }
    }
    mix
}

/// Generate queries over a video's planted events. Ground truth is derived
/// from the event list; every emitted query passes [`validate_query`].
pub fn generate_queries(
    mc: &ModelConfig,
    bank: &SignatureBank,
    video: &SyntheticVideo,
    mix: &QueryMix,
    seed: u64,
) -> Result<Vec<RestQuery>> {
    let total: usize = mix.iter().map(|(_, _, n)| n).sum();
    if total > 0 && video.events.is_empty() {
        return Err(Error::InvalidQuery(format!(
            "video {} has no events to query",
            video.video_id
        )));
    }
    let mut out = Vec::with_capacity(total);
    let mut counter = 0u64;
    for &(kind, class, n) in mix {
        let w = class.window_seconds();
        if w > video.duration {
            return Err(Error::DurationClassTooLong {
                requested: w,
                available: video.duration,
            });
        }
        for _ in 0..n {
            let mut rng = seeds::rng(
                seed,
                seeds::STREAM_QUERIES,
                seeds::id_hash(&video.video_id) ^ counter,
            );
            counter += 1;
            let ev = &video.events[rng.gen_range(0..video.events.len())];
            // Window centered near the event with jitter, clamped in-video.
            let center =
                (ev.interval.start + ev.interval.end) / 2.0 + rng.gen_range(-0.2..0.2) * w;
            let q_s = q32((center - w / 2.0).clamp(0.0, video.duration - w));
            let query_time = TimeInterval::new(q_s, q_s + w)?;
            let overlap = ev
                .interval
                .intersect(&query_time)
                .ok_or_else(|| Error::InvalidQuery("event/window overlap lost".into()))?;
            let query_id = format!("{}_q{:04}", video.video_id, counter - 1);
            let q = match kind {
                QueryKind::Activity => {
                    let gt = activities_of_object(video, ev.object_id, &overlap, mc.c_classes);
                    RestQuery {
                        query_id,
                        video_id: video.video_id.clone(),
                        kind,
                        query_time,
                        property_time: overlap,
                        activity_input: None,
                        object_input: Some(object_patch(
                            mc,
                            bank,
                            &video.video_id,
                            ev.object_id,
                            &mut rng,
                        )),
                        gt_activities: Some(gt),
                        gt_boxes: None,
                        gt_time: None,
                    }
                }
                QueryKind::Object => {
                    let times = sample_frame_times(&overlap, mc.fps_object);
                    let boxes = times.iter().map(|&t| ev.box_at(t)).collect();
                    let mut act = vec![0u8; mc.c_classes];
                    act[ev.activity_class] = 1;
                    RestQuery {
                        query_id,
                        video_id: video.video_id.clone(),
                        kind,
                        query_time,
                        property_time: overlap,
                        activity_input: Some(act),
                        object_input: None,
                        gt_activities: None,
                        gt_boxes: Some(boxes),
                        gt_time: None,
                    }
                }
                QueryKind::Time => {
                    let mut act = vec![0u8; mc.c_classes];
                    act[ev.activity_class] = 1;
                    RestQuery {
                        query_id,
                        video_id: video.video_id.clone(),
                        kind,
                        query_time,
                        property_time: overlap,
                        activity_input: Some(act),
                        object_input: Some(object_patch(
                            mc,
                            bank,
                            &video.video_id,
                            ev.object_id,
                            &mut rng,
                        )),
                        gt_activities: None,
                        gt_boxes: None,
                        gt_time: Some(overlap),
                    }
                }
            };
            debug_assert!(
                validate_query(&q, video.duration).is_empty(),
                "generated query violates invariants: {:?}",
                validate_query(&q, video.duration)
            );
            out.push(q);
        }
    }
    Ok(out)
}

/// Dataset-level generation knobs. All randomness derives from the model
/// seed; this record only sets shapes and sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub train_videos: usize,
    pub test_videos: usize,
    pub duration: f64,
    pub num_events: usize,
    pub snr: f64,
    /// Queries per kind per video (split across duration classes).
    pub queries_per_kind: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            train_videos: 8,
            test_videos: 4,
            duration: 600.0,
            num_events: 20,
            snr: 4.0,
            queries_per_kind: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub snr: f64,
    pub bank: SignatureBank,
    pub videos: Vec<SyntheticVideo>,
    pub queries: Vec<RestQuery>,
}

impl Dataset {
    pub fn video(&self, id: &str) -> Option<&SyntheticVideo> {
        self.videos.iter().find(|v| v.video_id == id)
    }

    pub fn videos_in(&self, split: Split) -> Vec<&SyntheticVideo> {
        self.videos.iter().filter(|v| v.split == split).collect()
    }

    pub fn queries_in(&self, split: Split) -> Vec<&RestQuery> {
        self.queries
            .iter()
            .filter(|q| {
                self.video(&q.video_id)
                    .map(|v| v.split == split)
                    .unwrap_or(false)
            })
            .collect()
    }
}

/// Generate the full train/test dataset from the model seed.
pub fn generate_dataset(mc: &ModelConfig, gc: &GenConfig) -> Result<Dataset> {
    let seed = mc.seed;
    let bank = SignatureBank::generate(mc, seed, gc.snr);
    let mut videos = Vec::new();
    let mut queries = Vec::new();
    let mix = standard_mix(gc.queries_per_kind);
    for i in 0..gc.train_videos + gc.test_videos {
        let (split, id) = if i < gc.train_videos {
            (Split::Train, format!("train_{i:03}"))
        } else {
            (Split::Test, format!("test_{:03}", i - gc.train_videos))
        };
        let vseed = seeds::mix(seed, seeds::STREAM_EVENTS, i as u64 + 1);
        let video = generate_video(mc, &bank, id, split, vseed, gc.duration, gc.num_events)?;
        queries.extend(generate_queries(mc, &bank, &video, &mix, vseed)?);
        videos.push(video);
    }
    Ok(Dataset {
        seed,
        snr: gc.snr,
        bank,
        videos,
        queries,
    })
}

// ---------------------------------------------------------------------------
// Dataset container format.
//
// All integers little-endian. Layout (version 1):
//   magic  b"VMDS" | version u32
//   seed u64 | snr f64 | d u32 | s u32 | grid_h u32 | grid_w u32
//   c_classes u32 | num_objects u32
//   signature bank: num_objects rows then c_classes rows of d x f32
//   video_count u32, then per video:
//     id (u16 len + utf8) | split u8 | duration f64 | fps f64
//     frame_count u32 | tokens (frame_count * s * d) x f32
//     event_count u32, per event:
//       activity u32 | object u32 | start f64 | end f64
//       keyframe_count u32, per keyframe: t f64 | cx,cy,w,h f32
//   query_count u32, then per query:
//     query_id, video_id (u16 len + utf8) | kind u8
//     query_time 2 x f64 | property_time 2 x f64
//     flags u8 (bit0 activity_input, bit1 object_input, bit2 gt_activities,
//               bit3 gt_boxes, bit4 gt_time)
//     payloads in flag order: activity u16 len + bytes | object u16 rows +
//     u16 cols + f32 data | gt_activities u16 len + bytes |
//     gt_boxes u32 count + 4 x f64 each | gt_time 2 x f64
// ---------------------------------------------------------------------------

const DS_MAGIC: [u8; 4] = *b"VMDS";
const DS_VERSION: u32 = 1;

struct Wr<W: Write>(W);

impl<W: Write> Wr<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.0.write_all(&[v])?)
    }
    fn u16(&mut self, v: u16) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn f32(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&(v as f32).to_le_bytes())?)
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        Ok(self.0.write_all(&v.to_le_bytes())?)
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.u16(s.len() as u16)?;
        Ok(self.0.write_all(s.as_bytes())?)
    }
}

struct Rd<R: Read>(R);

impl<R: Read> Rd<R> {
    fn bytes(&mut self, n: usize, section: &'static str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.0.read_exact(&mut buf).map_err(|_| Error::Truncated {
            section,
            needed: n,
        })?;
        Ok(buf)
    }
    fn u8(&mut self, sec: &'static str) -> Result<u8> {
        Ok(self.bytes(1, sec)?[0])
    }
    fn u16(&mut self, sec: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2, sec)?.try_into().unwrap()))
    }
    fn u32(&mut self, sec: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, sec)?.try_into().unwrap()))
    }
    fn u64(&mut self, sec: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, sec)?.try_into().unwrap()))
    }
    fn f32(&mut self, sec: &'static str) -> Result<f64> {
        Ok(f32::from_le_bytes(self.bytes(4, sec)?.try_into().unwrap()) as f64)
    }
    fn f64(&mut self, sec: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(8, sec)?.try_into().unwrap()))
    }
    fn str(&mut self, sec: &'static str) -> Result<String> {
        let n = self.u16(sec)? as usize;
        Ok(String::from_utf8_lossy(&self.bytes(n, sec)?).into_owned())
    }
    fn f32_block(&mut self, n: usize, sec: &'static str) -> Result<Vec<f64>> {
        let raw = self.bytes(n * 4, sec)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = Wr(BufWriter::new(file));
    w.0.write_all(&DS_MAGIC)?;
    w.u32(DS_VERSION)?;
    w.u64(ds.seed)?;
    w.f64(ds.snr)?;
    let d = ds.bank.object[0].len();
    let (s, gh, gw) = ds
        .videos
        .first()
        .map(|v| (v.s, v.grid_h, v.grid_w))
        .unwrap_or((0, 0, 0));
    w.u32(d as u32)?;
    w.u32(s as u32)?;
    w.u32(gh as u32)?;
    w.u32(gw as u32)?;
    w.u32(ds.bank.activity.len() as u32)?;
    w.u32(ds.bank.object.len() as u32)?;
    for sig in ds.bank.object.iter().chain(ds.bank.activity.iter()) {
        for &v in sig.iter() {
            w.f32(v)?;
        }
    }
    w.u32(ds.videos.len() as u32)?;
    for v in &ds.videos {
        w.str(&v.video_id)?;
        w.u8(match v.split {
            Split::Train => 0,
            Split::Test => 1,
        })?;
        w.f64(v.duration)?;
        w.f64(v.fps)?;
        w.u32(v.frame_count() as u32)?;
        for &t in v.tokens.iter() {
            w.f32(t)?;
        }
        w.u32(v.events.len() as u32)?;
        for e in &v.events {
            w.u32(e.activity_class as u32)?;
            w.u32(e.object_id as u32)?;
            w.f64(e.interval.start)?;
            w.f64(e.interval.end)?;
            w.u32(e.keyframes.len() as u32)?;
            for (t, b) in &e.keyframes {
                w.f64(*t)?;
                w.f32(b.cx)?;
                w.f32(b.cy)?;
                w.f32(b.w)?;
                w.f32(b.h)?;
            }
        }
    }
    w.u32(ds.queries.len() as u32)?;
    for q in &ds.queries {
        w.str(&q.query_id)?;
        w.str(&q.video_id)?;
        w.u8(match q.kind {
            QueryKind::Activity => 0,
            QueryKind::Object => 1,
            QueryKind::Time => 2,
        })?;
        w.f64(q.query_time.start)?;
        w.f64(q.query_time.end)?;
        w.f64(q.property_time.start)?;
        w.f64(q.property_time.end)?;
        let flags = q.activity_input.is_some() as u8
            | (q.object_input.is_some() as u8) << 1
            | (q.gt_activities.is_some() as u8) << 2
            | (q.gt_boxes.is_some() as u8) << 3
            | (q.gt_time.is_some() as u8) << 4;
        w.u8(flags)?;
        if let Some(a) = &q.activity_input {
            w.u16(a.len() as u16)?;
            w.0.write_all(a)?;
        }
        if let Some(o) = &q.object_input {
            w.u16(o.len() as u16)?;
            w.u16(o.dim() as u16)?;
            for &v in o.data.iter() {
                w.f32(v)?;
            }
        }
        if let Some(a) = &q.gt_activities {
            w.u16(a.len() as u16)?;
            w.0.write_all(a)?;
        }
        if let Some(boxes) = &q.gt_boxes {
            w.u32(boxes.len() as u32)?;
            for b in boxes {
                w.f64(b.cx)?;
                w.f64(b.cy)?;
                w.f64(b.w)?;
                w.f64(b.h)?;
            }
        }
        if let Some(t) = &q.gt_time {
            w.f64(t.start)?;
            w.f64(t.end)?;
        }
    }
    w.0.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut r = Rd(BufReader::new(file));
    let magic: [u8; 4] = r.bytes(4, "magic")?.try_into().unwrap();
    if magic != DS_MAGIC {
        return Err(Error::BadMagic {
            expected: DS_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != DS_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: DS_VERSION,
        });
    }
    let seed = r.u64("seed")?;
    let snr = r.f64("snr")?;
    let d = r.u32("d")? as usize;
    let s = r.u32("s")? as usize;
    let grid_h = r.u32("grid_h")? as usize;
    let grid_w = r.u32("grid_w")? as usize;
    let c_classes = r.u32("c_classes")? as usize;
    let num_objects = r.u32("num_objects")? as usize;
    let mut object = Vec::with_capacity(num_objects);
    for _ in 0..num_objects {
        object.push(Array1::from_vec(r.f32_block(d, "signatures")?));
    }
    let mut activity = Vec::with_capacity(c_classes);
    for _ in 0..c_classes {
        activity.push(Array1::from_vec(r.f32_block(d, "signatures")?));
    }
    let bank = SignatureBank {
        object,
        activity,
        snr,
    };
    let video_count = r.u32("video count")? as usize;
    let mut videos = Vec::with_capacity(video_count);
    for _ in 0..video_count {
        let video_id = r.str("video id")?;
        let split = if r.u8("split")? == 0 {
            Split::Train
        } else {
            Split::Test
        };
        let duration = r.f64("duration")?;
        let fps = r.f64("fps")?;
        let frame_count = r.u32("frame count")? as usize;
        let flat = r.f32_block(frame_count * s * d, "tokens")?;
        let tokens = Array2::from_shape_vec((frame_count * s, d), flat).expect("token shape");
        let event_count = r.u32("event count")? as usize;
        let mut events = Vec::with_capacity(event_count);
        for _ in 0..event_count {
            let activity_class = r.u32("event activity")? as usize;
            let object_id = r.u32("event object")? as usize;
            let start = r.f64("event start")?;
            let end = r.f64("event end")?;
            let kf_count = r.u32("keyframe count")? as usize;
            let mut keyframes = Vec::with_capacity(kf_count);
            for _ in 0..kf_count {
                let t = r.f64("keyframe t")?;
                let cx = r.f32("kf cx")?;
                let cy = r.f32("kf cy")?;
                let w = r.f32("kf w")?;
                let h = r.f32("kf h")?;
                keyframes.push((t, NormBox::new(cx, cy, w, h)));
            }
            events.push(Event {
                activity_class,
                object_id,
                interval: TimeInterval::new(start, end)?,
                keyframes,
            });
        }
        videos.push(SyntheticVideo {
            video_id,
            split,
            duration,
            fps,
            tokens,
            events,
            s,
            grid_h,
            grid_w,
        });
    }
    let query_count = r.u32("query count")? as usize;
    let mut queries = Vec::with_capacity(query_count);
    for _ in 0..query_count {
        let query_id = r.str("query id")?;
        let video_id = r.str("query video id")?;
        let kind = match r.u8("query kind")? {
            0 => QueryKind::Activity,
            1 => QueryKind::Object,
            _ => QueryKind::Time,
        };
        let query_time = TimeInterval::new(r.f64("q_s")?, r.f64("q_e")?)?;
        let property_time = TimeInterval::new(r.f64("t_s")?, r.f64("t_e")?)?;
        let flags = r.u8("query flags")?;
        let activity_input = if flags & 1 != 0 {
            let n = r.u16("activity len")? as usize;
            Some(r.bytes(n, "activity input")?)
        } else {
            None
        };
        let object_input = if flags & 2 != 0 {
            let n = r.u16("object rows")? as usize;
            let dd = r.u16("object cols")? as usize;
            let flat = r.f32_block(n * dd, "object tokens")?;
            let data = Array2::from_shape_vec((n, dd), flat).expect("object shape");
            let prov = (0..n)
                .map(|c| TokenProv {
                    frame_index: 0,
                    spatial_cell: c as u32,
                    video_time: -1.0,
                })
                .collect();
            Some(TokenBlock::new(video_id.clone(), data, prov))
        } else {
            None
        };
        let gt_activities = if flags & 4 != 0 {
            let n = r.u16("gt act len")? as usize;
            Some(r.bytes(n, "gt activities")?)
        } else {
            None
        };
        let gt_boxes = if flags & 8 != 0 {
            let n = r.u32("gt box count")? as usize;
            let mut boxes = Vec::with_capacity(n);
            for _ in 0..n {
                let cx = r.f64("box cx")?;
                let cy = r.f64("box cy")?;
                let w = r.f64("box w")?;
                let h = r.f64("box h")?;
                boxes.push(NormBox::new(cx, cy, w, h));
            }
            Some(boxes)
        } else {
            None
        };
        let gt_time = if flags & 16 != 0 {
            Some(TimeInterval::new(r.f64("gt_t s")?, r.f64("gt_t e")?)?)
        } else {
            None
        };
        queries.push(RestQuery {
            query_id,
            video_id,
            kind,
            query_time,
            property_time,
            activity_input,
            object_input,
            gt_activities,
            gt_boxes,
            gt_time,
        });
    }
    Ok(Dataset {
        seed,
        snr,
        bank,
        videos,
        queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dataset() -> Dataset {
        let mc = ModelConfig::default();
        let gc = GenConfig {
            train_videos: 1,
            test_videos: 1,
            duration: 320.0,
            num_events: 8,
            snr: 4.0,
            queries_per_kind: 6,
        };
        generate_dataset(&mc, &gc).unwrap()
    }

    #[test]
    fn video_frame_count_and_determinism() {
        let mc = ModelConfig::default();
        let bank = SignatureBank::generate(&mc, 7, 4.0);
        let v1 = generate_video(&mc, &bank, "v", Split::Train, 7, 600.0, 20).unwrap();
        assert_eq!(v1.frame_count(), 601);
        assert_eq!(v1.events.len(), 20);
        assert_eq!(v1.total_tokens(), 601 * mc.s);
        let v2 = generate_video(&mc, &bank, "v", Split::Train, 7, 600.0, 20).unwrap();
        assert_eq!(v1, v2, "same seed must be bit-identical");
        let v3 = generate_video(&mc, &bank, "v", Split::Train, 8, 600.0, 20).unwrap();
        assert_ne!(v1.tokens, v3.tokens);
    }

    #[test]
    fn zero_events_is_pure_noise() {
        let mc = ModelConfig::default();
        let bank = SignatureBank::generate(&mc, 3, 4.0);
        let v = generate_video(&mc, &bank, "v", Split::Train, 3, 30.0, 0).unwrap();
        assert!(v.events.is_empty());
    }

    #[test]
    fn no_same_object_collisions() {
        let mc = ModelConfig::default();
        let bank = SignatureBank::generate(&mc, 11, 4.0);
        let v = generate_video(&mc, &bank, "v", Split::Train, 11, 300.0, 15).unwrap();
        // Exhaustive scan over frames and cells.
        for f in 0..v.frame_count() {
            let t = v.frame_time(f);
            for cell in 0..mc.s {
                for obj in 0..mc.num_objects {
                    let holders = v
                        .events
                        .iter()
                        .filter(|e| e.object_id == obj && e.covers(t, cell, mc.grid_h, mc.grid_w))
                        .count();
                    assert!(holders <= 1, "frame {f} cell {cell} object {obj}");
                }
            }
        }
    }

    #[test]
    fn planted_signal_linearly_separable() {
        let mc = ModelConfig::default();
        let bank = SignatureBank::generate(&mc, 5, 4.0);
        let v = generate_video(&mc, &bank, "v", Split::Train, 5, 300.0, 12).unwrap();
        let mut event_rows = Vec::new();
        let mut noise_rows = Vec::new();
        for f in 0..v.frame_count() {
            let t = v.frame_time(f);
            for cell in 0..mc.s {
                let row = v.tokens.row(f * mc.s + cell);
                let in_event = v
                    .events
                    .iter()
                    .any(|e| e.covers(t, cell, mc.grid_h, mc.grid_w));
                if in_event {
                    event_rows.push(row);
                } else {
                    noise_rows.push(row);
                }
            }
        }
        assert!(!event_rows.is_empty() && !noise_rows.is_empty());
        // Mean-difference linear probe with midpoint threshold.
        let d = mc.d;
        let mut mean_e = vec![0.0; d];
        let mut mean_n = vec![0.0; d];
        for r in &event_rows {
            for j in 0..d {
                mean_e[j] += r[j] / event_rows.len() as f64;
            }
        }
        for r in &noise_rows {
            for j in 0..d {
                mean_n[j] += r[j] / noise_rows.len() as f64;
            }
        }
        let w: Vec<f64> = (0..d).map(|j| mean_e[j] - mean_n[j]).collect();
        let proj = |r: &ndarray::ArrayView1<f64>| -> f64 {
            r.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let thr = (event_rows.iter().map(proj).sum::<f64>() / event_rows.len() as f64
            + noise_rows.iter().map(proj).sum::<f64>() / noise_rows.len() as f64)
            / 2.0;
        let correct = event_rows.iter().filter(|r| proj(r) > thr).count()
            + noise_rows.iter().filter(|r| proj(r) <= thr).count();
        let acc = correct as f64 / (event_rows.len() + noise_rows.len()) as f64;
        assert!(acc > 0.95, "probe accuracy {acc}");
    }

    #[test]
    fn queries_validate_and_gt_matches_brute_force() {
        let ds = small_dataset();
        assert_eq!(ds.queries.len(), 36);
        for q in &ds.queries {
            let video = ds.video(&q.video_id).unwrap();
            assert!(
                validate_query(q, video.duration).is_empty(),
                "query {} invalid: {:?}",
                q.query_id,
                validate_query(q, video.duration)
            );
            match q.kind {
                QueryKind::Activity => {
                    let patch = q.object_input.as_ref().unwrap();
                    // Recover the object id by nearest signature.
                    let mean = patch.data.mean_axis(ndarray::Axis(0)).unwrap();
                    let obj = (0..ds.bank.object.len())
                        .max_by(|&a, &b| {
                            let da = ds.bank.object[a].dot(&mean);
                            let db = ds.bank.object[b].dot(&mean);
                            da.partial_cmp(&db).unwrap()
                        })
                        .unwrap();
                    let mut expect = vec![0u8; ds.bank.activity.len()];
                    for e in &video.events {
                        if e.object_id == obj {
                            if let Some(i) = e.interval.intersect(&q.property_time) {
                                if i.duration() > 0.0 {
                                    expect[e.activity_class] = 1;
                                }
                            }
                        }
                    }
                    assert_eq!(q.gt_activities.as_ref().unwrap(), &expect);
                }
                QueryKind::Object => {
                    let boxes = q.gt_boxes.as_ref().unwrap();
                    let times = sample_frame_times(&q.property_time, 5.0);
                    assert_eq!(boxes.len(), times.len());
                    let matched = video.events.iter().any(|e| {
                        e.interval.contains(&q.property_time)
                            && times
                                .iter()
                                .zip(boxes.iter())
                                .all(|(&t, b)| e.box_at(t) == *b)
                    });
                    assert!(matched, "query {}", q.query_id);
                }
                QueryKind::Time => {
                    let gt = q.gt_time.unwrap();
                    assert!(q.query_time.contains(&gt));
                    let matched = video
                        .events
                        .iter()
                        .any(|e| e.interval.intersect(&q.query_time) == Some(gt));
                    assert!(matched);
                }
            }
        }
    }

    #[test]
    fn dataset_roundtrip_bit_exact() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn dataset_wrong_magic_and_truncation() {
        let ds = small_dataset();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        write_dataset(&ds, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.bin");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(read_dataset(&bad), Err(Error::BadMagic { .. })));
        let trunc = dir.path().join("trunc.bin");
        let orig = std::fs::read(&path).unwrap();
        std::fs::write(&trunc, &orig[..orig.len() / 2]).unwrap();
        assert!(matches!(
            read_dataset(&trunc),
            Err(Error::Truncated { .. })
        ));
        // Version bump is a distinct failure.
        let mut vbytes = std::fs::read(&path).unwrap();
        vbytes[4] = 99;
        let vbad = dir.path().join("vbad.bin");
        std::fs::write(&vbad, &vbytes).unwrap();
        assert!(matches!(
            read_dataset(&vbad),
            Err(Error::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn duration_class_too_long_is_reported() {
        let mc = ModelConfig::default();
        let bank = SignatureBank::generate(&mc, 5, 4.0);
        let v = generate_video(&mc, &bank, "v", Split::Train, 5, 60.0, 3).unwrap();
        let mix = vec![(QueryKind::Activity, DurationClass::Long, 1)];
        assert!(matches!(
            generate_queries(&mc, &bank, &v, &mix, 5),
            Err(Error::DurationClassTooLong { .. })
        ));
    }
}
