//! Shared domain vocabulary: time intervals, token blocks, queries, and the
//! validated model configuration used by every other module.
//!
//! Four time representations coexist per video: the video span `(v_s, v_e)`,
//! a query window `(q_s, q_e)`, the property window `(t_s, t_e)` during
//! which the queried relation holds, and a sampled clip span `(c_s, c_e)`.
//! They obey `v_s <= q_s <= t_s <= t_e <= q_e <= v_e`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A closed interval in video seconds, `start <= end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeInterval {
    pub start: f64,
    pub end: f64,
}

impl TimeInterval {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite()) || start < 0.0 || start > end {
            return Err(Error::InvalidQuery(format!(
                "invalid interval ({start}, {end})"
            )));
        }
        Ok(Self { start, end })
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn contains(&self, other: &TimeInterval) -> bool {
        self.start <= other.start && other.end <= self.end
    }

    pub fn contains_time(&self, t: f64) -> bool {
        self.start <= t && t <= self.end
    }

    /// Intersection, or `None` when the intervals do not overlap at all.
    pub fn intersect(&self, other: &TimeInterval) -> Option<TimeInterval> {
        let s = self.start.max(other.start);
        let e = self.end.min(other.end);
        if s <= e {
            Some(TimeInterval { start: s, end: e })
        } else {
            None
        }
    }
}

/// Intersection-over-union of two time intervals.
///
/// Zero-length conventions: identical point intervals give 1.0, disjoint
/// points give 0.0.
pub fn interval_iou(a: &TimeInterval, b: &TimeInterval) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.duration() + b.duration() - inter;
    if union <= 0.0 {
        // Both degenerate: equal points overlap fully, distinct points not at all.
        if (a.start - b.start).abs() == 0.0 && (a.end - b.end).abs() == 0.0 {
            return 1.0;
        }
        return 0.0;
    }
    inter / union
}

/// Grid of sampled frame times `t_s, t_s + 1/fps, ...` up to and including
/// the last point `<= t_e`. Length is `floor((t_e - t_s) * fps) + 1`.
///
/// This is the single rounding rule for converting continuous time to frame
/// grids; every head, loss, and metric derives its frame count through it.
pub fn sample_frame_times(interval: &TimeInterval, fps: f64) -> Vec<f64> {
    assert!(fps > 0.0, "fps must be positive");
    let n = ((interval.duration() * fps) + 1e-9).floor() as usize + 1;
    (0..n).map(|i| interval.start + i as f64 / fps).collect()
}

/// Per-token provenance. All tokens of one [`TokenBlock`] share a video id,
/// so only the frame-level fields live here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenProv {
    pub frame_index: u32,
    pub spatial_cell: u32,
    /// Absolute video time of the source frame in seconds. Negative for
    /// tokens that do not come from a video frame (object patches).
    pub video_time: f64,
}

/// A set of `n` d-dimensional tokens with per-token provenance and a
/// positional-encoding flag guarding against double application.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBlock {
    pub video_id: String,
    pub data: Array2<f64>,
    pub prov: Vec<TokenProv>,
    pub pe_applied: Vec<bool>,
}

impl TokenBlock {
    pub fn new(video_id: impl Into<String>, data: Array2<f64>, prov: Vec<TokenProv>) -> Self {
        assert_eq!(data.nrows(), prov.len(), "one provenance record per token");
        let n = prov.len();
        Self {
            video_id: video_id.into(),
            data,
            prov,
            pe_applied: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.prov.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prov.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Concatenate blocks row-wise (all must share video id and dim).
    pub fn concat(blocks: &[&TokenBlock]) -> TokenBlock {
        assert!(!blocks.is_empty());
        let video_id = blocks[0].video_id.clone();
        let d = blocks[0].dim();
        let n: usize = blocks.iter().map(|b| b.len()).sum();
        let mut data = Array2::zeros((n, d));
        let mut prov = Vec::with_capacity(n);
        let mut pe = Vec::with_capacity(n);
        let mut row = 0;
        for b in blocks {
            assert_eq!(b.video_id, video_id, "cross-video token block concat");
            assert_eq!(b.dim(), d);
            data.slice_mut(ndarray::s![row..row + b.len(), ..])
                .assign(&b.data);
            prov.extend_from_slice(&b.prov);
            pe.extend_from_slice(&b.pe_applied);
            row += b.len();
        }
        TokenBlock {
            video_id,
            data,
            prov,
            pe_applied: pe,
        }
    }

    /// New block holding the given rows, provenance copied along.
    pub fn gather(&self, indices: &[usize]) -> TokenBlock {
        let d = self.dim();
        let mut data = Array2::zeros((indices.len(), d));
        let mut prov = Vec::with_capacity(indices.len());
        let mut pe = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            data.row_mut(r).assign(&self.data.row(i));
            prov.push(self.prov[i]);
            pe.push(self.pe_applied[i]);
        }
        TokenBlock {
            video_id: self.video_id.clone(),
            data,
            prov,
            pe_applied: pe,
        }
    }
}

/// Normalized bounding box in `(cx, cy, w, h)` form, all coordinates in [0,1].
/// Corner form is derived on demand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl NormBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn is_valid(&self) -> bool {
        [self.cx, self.cy, self.w, self.h]
            .iter()
            .all(|v| (0.0..=1.0).contains(v))
    }

    /// `(x1, y1, x2, y2)` corner form.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Activity,
    Object,
    Time,
}

impl QueryKind {
    pub fn name(&self) -> &'static str {
        match self {
            QueryKind::Activity => "activity",
            QueryKind::Object => "object",
            QueryKind::Time => "time",
        }
    }
}

/// Query duration class, decided by the query-window length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DurationClass {
    Short,
    Medium,
    Long,
}

impl DurationClass {
    /// Nominal synthetic window length in seconds.
    pub fn window_seconds(&self) -> f64 {
        match self {
            DurationClass::Short => 30.0,
            DurationClass::Medium => 120.0,
            DurationClass::Long => 300.0,
        }
    }

    /// Classify a query window by its length (nearest nominal class).
    pub fn classify(window_len: f64) -> DurationClass {
        if window_len < 75.0 {
            DurationClass::Short
        } else if window_len < 210.0 {
            DurationClass::Medium
        } else {
            DurationClass::Long
        }
    }

    pub fn all() -> [DurationClass; 3] {
        [
            DurationClass::Short,
            DurationClass::Medium,
            DurationClass::Long,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            DurationClass::Short => "short",
            DurationClass::Medium => "medium",
            DurationClass::Long => "long",
        }
    }
}

/// One relational space-time query: two properties are given, the third is
/// asked for. Ground truth carries the answer for training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct RestQuery {
    pub query_id: String,
    pub video_id: String,
    pub kind: QueryKind,
    /// Query window `(q_s, q_e)`.
    pub query_time: TimeInterval,
    /// Property window `(t_s, t_e)` within the query window.
    pub property_time: TimeInterval,
    /// Multi-hot activity vector of length C (object and time queries).
    pub activity_input: Option<Vec<u8>>,
    /// Object patch of `s` tokens (activity and time queries).
    pub object_input: Option<TokenBlock>,
    pub gt_activities: Option<Vec<u8>>,
    /// One box per sampled frame of the property window at the object fps.
    pub gt_boxes: Option<Vec<NormBox>>,
    pub gt_time: Option<TimeInterval>,
}

impl RestQuery {
    pub fn duration_class(&self) -> DurationClass {
        DurationClass::classify(self.query_time.duration())
    }
}

/// Check every query invariant against the owning video's duration.
/// Violations are returned as data, not raised; an empty list means valid.
pub fn validate_query(q: &RestQuery, video_duration: f64) -> Vec<String> {
    let mut v = Vec::new();
    let qt = &q.query_time;
    let pt = &q.property_time;
    if qt.start > qt.end {
        v.push("query_time start > end".to_string());
    }
    if pt.start > pt.end {
        v.push("property_time start > end".to_string());
    }
    if qt.start < 0.0 {
        v.push("q_s < v_s".to_string());
    }
    if pt.start < qt.start {
        v.push("t_s < q_s".to_string());
    }
    if pt.end > qt.end {
        v.push("t_e > q_e".to_string());
    }
    if qt.end > video_duration {
        v.push("q_e > v_e".to_string());
    }
    let is_binary = |vec: &[u8]| vec.iter().all(|&b| b <= 1);
    if let Some(a) = &q.activity_input {
        if !is_binary(a) {
            v.push("activity_input not binary".to_string());
        }
    }
    if let Some(g) = &q.gt_activities {
        if !is_binary(g) {
            v.push("gt_activities not binary".to_string());
        }
    }
    if let Some(boxes) = &q.gt_boxes {
        if boxes.iter().any(|b| !b.is_valid()) {
            v.push("gt_boxes coordinate outside [0,1]".to_string());
        }
    }
    match q.kind {
        QueryKind::Activity => {
            if q.object_input.is_none() {
                v.push("object_input required".to_string());
            }
            if q.gt_activities.is_none() {
                v.push("gt_activities required".to_string());
            }
        }
        QueryKind::Object => {
            if q.activity_input.is_none() {
                v.push("activity_input required".to_string());
            }
            if q.gt_boxes.is_none() {
                v.push("gt_boxes required".to_string());
            }
        }
        QueryKind::Time => {
            if q.activity_input.is_none() {
                v.push("activity_input required".to_string());
            }
            if q.object_input.is_none() {
                v.push("object_input required".to_string());
            }
            match &q.gt_time {
                None => v.push("gt_time required".to_string()),
                Some(gt) => {
                    if !q.query_time.contains(gt) {
                        v.push("gt_time \u{2284} query_time".to_string());
                    }
                }
            }
        }
    }
    v
}

/// Which token-selection mechanism populates memory. `Random` is the
/// uniform-sampling ablation arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Neural,
    Random,
}

/// Every hyperparameter in one validated record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Token dimension.
    pub d: usize,
    /// Tokens per frame (`grid_h * grid_w`).
    pub s: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Frames per clip (T).
    pub t_clip: usize,
    /// Memory tokens per video; must tile into `nf = m / s` pseudo-frames.
    pub m: usize,
    /// Activity classes (C).
    pub c_classes: usize,
    pub num_objects: usize,
    /// Encoder/decoder layer count (N).
    pub n_layers: usize,
    pub n_heads: usize,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Continual-learning heap capacity (p); 0 disables the auxiliary loss.
    pub heap_capacity: usize,
    pub temperature_start: f64,
    pub temperature_end: f64,
    pub temperature_decay_steps: u64,
    pub fps_default: f64,
    pub fps_object: f64,
    pub learning_rate_sampler: f64,
    pub learning_rate_rest: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Simulated worker count (r).
    pub num_workers: usize,
    pub epochs: usize,
    /// Maximum supported video length in seconds (positional table size).
    pub max_video_len_s: f64,
    pub seed: u64,
    pub sampler_kind: SamplerKind,
    /// Apply Gumbel noise during inference-time population (off by default).
    pub infer_noise: bool,
    /// Draw fresh Gumbel seeds per population pass (vs reusing pass 0's).
    pub fresh_pass_seeds: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            s: 9,
            grid_h: 3,
            grid_w: 3,
            t_clip: 12,
            m: 108,
            c_classes: 8,
            num_objects: 6,
            n_layers: 2,
            n_heads: 2,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            heap_capacity: 2,
            temperature_start: 1.5,
            temperature_end: 1.0,
            temperature_decay_steps: 500,
            fps_default: 1.0,
            fps_object: 5.0,
            learning_rate_sampler: 1e-3,
            learning_rate_rest: 1e-4,
            momentum: 0.9,
            batch_size: 4,
            num_workers: 1,
            epochs: 10,
            max_video_len_s: 650.0,
            seed: 0,
            sampler_kind: SamplerKind::Neural,
            infer_noise: false,
            fresh_pass_seeds: true,
        }
    }
}

impl ModelConfig {
    /// Pseudo-frame count `nf = m / s` used by the fusion step.
    pub fn nf(&self) -> usize {
        self.m / self.s
    }

    /// Clip token count `k = T * s`.
    pub fn k(&self) -> usize {
        self.t_clip * self.s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.s != self.grid_h * self.grid_w {
            return fail(format!(
                "s ({}) != grid_h*grid_w ({}x{})",
                self.s, self.grid_h, self.grid_w
            ));
        }
        if self.m == 0 || self.s == 0 || self.m % self.s != 0 {
            return fail(format!(
                "m ({}) must be a positive multiple of s ({})",
                self.m, self.s
            ));
        }
        if self.d == 0 || self.d % 4 != 0 {
            return fail(format!("d ({}) must be a positive multiple of 4", self.d));
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return fail(format!(
                "n_heads ({}) must divide d ({})",
                self.n_heads, self.d
            ));
        }
        if self.t_clip == 0 || self.n_layers == 0 {
            return fail("t_clip and n_layers must be positive".to_string());
        }
        if self.c_classes == 0 || self.num_objects == 0 {
            return fail("c_classes and num_objects must be positive".to_string());
        }
        if self.temperature_start <= 0.0 || self.temperature_end <= 0.0 {
            return fail("temperatures must be positive".to_string());
        }
        if self.fps_default <= 0.0 || self.fps_object <= 0.0 {
            return fail("fps values must be positive".to_string());
        }
        if self.batch_size == 0 || self.num_workers == 0 {
            return fail("batch_size and num_workers must be positive".to_string());
        }
        if self.max_video_len_s <= 0.0 {
            return fail("max_video_len_s must be positive".to_string());
        }
        Ok(())
    }

    /// Tiny configuration used by gradient-fidelity tests.
    pub fn tiny() -> Self {
        Self {
            d: 16,
            s: 4,
            grid_h: 2,
            grid_w: 2,
            t_clip: 3,
            m: 12,
            c_classes: 4,
            num_objects: 3,
            n_layers: 1,
            n_heads: 2,
            max_video_len_s: 64.0,
            ..Self::default()
        }
    }
}
