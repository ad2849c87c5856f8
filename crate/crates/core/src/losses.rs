//! Training losses and the online continual-learning heap.
//!
//! Activity queries use a sigmoid focal loss averaged over classes; the
//! weighting is chosen so that `gamma = 0, alpha = 1` reduces exactly to
//! mean binary cross-entropy (`alpha` scales the positive term, negatives
//! are unweighted). Object queries combine an L1 term on `(cx, cy, w, h)`
//! with a generalized-IoU term on corner form. Time queries use one
//! cross-entropy per endpoint over the query-window frame grid.
//!
//! Past queries replayed from the heap are answered from the *current*
//! memory state, which is what pushes the sampler to keep globally useful
//! tokens in memory rather than always favoring the current clip.

use std::collections::{BTreeMap, VecDeque};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::querynet::{HeadOutput, QueryOutput};
use crate::tape::{Tape, Var};
use crate::types::{
    sample_frame_times, ModelConfig, NormBox, QueryKind, RestQuery, TimeInterval,
};

/// Sigmoid focal loss over C classes, mean over classes.
pub fn focal_loss(
    t: &mut Tape,
    logits: Var,
    targets: &[u8],
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    let c = t.value(logits).len();
    if c != targets.len() {
        return Err(Error::DimensionMismatch {
            what: "focal targets",
            expected: c,
            actual: targets.len(),
        });
    }
    let shape = t.value(logits).raw_dim();
    let pos_mask = Array2::from_shape_fn(shape, |(_, j)| targets[j] as f64);
    let neg_mask = pos_mask.mapv(|v| 1.0 - v);
    let neg_x = t.affine(logits, -1.0, 0.0);
    // -ln p = softplus(-x), -ln(1-p) = softplus(x); both saturate safely.
    let sp_pos = t.softplus(neg_x);
    let sp_neg = t.softplus(logits);
    let one_minus_p = t.sigmoid(neg_x);
    let p = t.sigmoid(logits);
    let w_pos = t.pow_const(one_minus_p, gamma);
    let w_neg = t.pow_const(p, gamma);
    let pos_term = t.mul(w_pos, sp_pos);
    let pos_term = t.affine(pos_term, alpha, 0.0);
    let neg_term = t.mul(w_neg, sp_neg);
    let pos_masked = t.mul_const(pos_term, &pos_mask);
    let neg_masked = t.mul_const(neg_term, &neg_mask);
    let sum = t.add(pos_masked, neg_masked);
    Ok(t.mean_all(sum))
}

/// Scalar generalized IoU of two corner-form boxes `(x1, y1, x2, y2)`.
///
/// Degenerate conventions: zero union makes the IoU term 0; a zero-area
/// enclosing box drops the penalty term.
pub fn giou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let ex1 = a[0].min(b[0]);
    let ey1 = a[1].min(b[1]);
    let ex2 = a[2].max(b[2]);
    let ey2 = a[3].max(b[3]);
    let enclosing = (ex2 - ex1) * (ey2 - ey1);
    let penalty = if enclosing > 0.0 {
        (enclosing - union) / enclosing
    } else {
        0.0
    };
    iou - penalty
}

/// Plain IoU of two corner-form boxes (the per-frame primitive behind the
/// box-track metric).
pub fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

fn box_columns(t: &mut Tape, boxes: Var) -> (Var, Var, Var, Var) {
    (
        t.slice_cols(boxes, 0, 1),
        t.slice_cols(boxes, 1, 1),
        t.slice_cols(boxes, 2, 1),
        t.slice_cols(boxes, 3, 1),
    )
}

/// Mean `(1 - gIoU)` over `L` predicted boxes (`L x 4`, `(cx, cy, w, h)`)
/// against ground-truth boxes. Differentiable; predicted widths/heights come
/// from a sigmoid and are strictly positive.
pub fn giou_loss(t: &mut Tape, pred: Var, gt: &[NormBox]) -> Result<Var> {
    let l = t.value(pred).nrows();
    if l != gt.len() {
        return Err(Error::DimensionMismatch {
            what: "giou boxes",
            expected: l,
            actual: gt.len(),
        });
    }
    let (cx, cy, w, h) = box_columns(t, pred);
    let half_w = t.affine(w, 0.5, 0.0);
    let half_h = t.affine(h, 0.5, 0.0);
    let x1 = t.sub(cx, half_w);
    let x2 = t.add(cx, half_w);
    let y1 = t.sub(cy, half_h);
    let y2 = t.add(cy, half_h);
    let col = |f: fn(&NormBox) -> f64| {
        Array2::from_shape_fn((l, 1), |(i, _)| f(&gt[i]))
    };
    let gx1 = t.constant(col(|b| b.corners()[0]));
    let gy1 = t.constant(col(|b| b.corners()[1]));
    let gx2 = t.constant(col(|b| b.corners()[2]));
    let gy2 = t.constant(col(|b| b.corners()[3]));
    let g_area = {
        let w = col(|b| b.w);
        let h = col(|b| b.h);
        t.constant(&w * &h)
    };

    let ix1 = t.max(x1, gx1);
    let ix2 = t.min(x2, gx2);
    let iy1 = t.max(y1, gy1);
    let iy2 = t.min(y2, gy2);
    let iw_raw = t.sub(ix2, ix1);
    let iw = t.relu(iw_raw);
    let ih_raw = t.sub(iy2, iy1);
    let ih = t.relu(ih_raw);
    let inter = t.mul(iw, ih);
    let p_area = t.mul(w, h);
    let sum_areas = t.add(p_area, g_area);
    let union = t.sub(sum_areas, inter);
    let iou = t.div(inter, union);

    let ex1 = t.min(x1, gx1);
    let ex2 = t.max(x2, gx2);
    let ey1 = t.min(y1, gy1);
    let ey2 = t.max(y2, gy2);
    let ew = t.sub(ex2, ex1);
    let eh = t.sub(ey2, ey1);
    let e_area = t.mul(ew, eh);
    let hole = t.sub(e_area, union);
    let penalty = t.div(hole, e_area);
    let g = t.sub(iou, penalty);
    let one_minus = t.affine(g, -1.0, 1.0);
    Ok(t.mean_all(one_minus))
}

/// Mean absolute coordinate error over `L x 4` `(cx, cy, w, h)` boxes.
pub fn l1_box_loss(t: &mut Tape, pred: Var, gt: &[NormBox]) -> Result<Var> {
    let l = t.value(pred).nrows();
    if l != gt.len() {
        return Err(Error::DimensionMismatch {
            what: "l1 boxes",
            expected: l,
            actual: gt.len(),
        });
    }
    let neg_gt = Array2::from_shape_fn((l, 4), |(i, j)| match j {
        0 => -gt[i].cx,
        1 => -gt[i].cy,
        2 => -gt[i].w,
        _ => -gt[i].h,
    });
    let diff = t.add_const(pred, &neg_gt);
    let abs = t.abs(diff);
    Ok(t.mean_all(abs))
}

/// Combined box objective: `lambda_1 * L1 + lambda_gIoU * (1 - gIoU)`.
pub fn object_loss(
    t: &mut Tape,
    pred: Var,
    gt: &[NormBox],
    lambda_l1: f64,
    lambda_giou: f64,
) -> Result<Var> {
    let l1 = l1_box_loss(t, pred, gt)?;
    let gl = giou_loss(t, pred, gt)?;
    let a = t.affine(l1, lambda_l1, 0.0);
    let b = t.affine(gl, lambda_giou, 0.0);
    Ok(t.add(a, b))
}

/// Nearest grid index of time `time` on the sampled frame grid of `window`.
pub fn grid_index_of(window: &TimeInterval, fps: f64, time: f64, grid_len: usize) -> usize {
    let i = ((time - window.start) * fps).round();
    (i.max(0.0) as usize).min(grid_len.saturating_sub(1))
}

/// Cross-entropy on start and end grid positions over the query window.
pub fn time_loss(
    t: &mut Tape,
    start_logits: Var,
    end_logits: Var,
    gt: &TimeInterval,
    window: &TimeInterval,
    fps: f64,
) -> Result<Var> {
    if !window.contains(gt) {
        return Err(Error::InvalidQuery(format!(
            "gt interval ({}, {}) outside query window ({}, {})",
            gt.start, gt.end, window.start, window.end
        )));
    }
    let grid = sample_frame_times(window, fps);
    let l = grid.len();
    if t.value(start_logits).nrows() != l || t.value(end_logits).nrows() != l {
        return Err(Error::DimensionMismatch {
            what: "time logits",
            expected: l,
            actual: t.value(start_logits).nrows(),
        });
    }
    let si = grid_index_of(window, fps, gt.start, l);
    let ei = grid_index_of(window, fps, gt.end, l);
    let ce = |t: &mut Tape, logits: Var, idx: usize| {
        let lse = t.logsumexp_all(logits);
        let sel = t.slice_rows(logits, idx, 1);
        t.sub(lse, sel)
    };
    let cs = ce(t, start_logits, si);
    let ce_ = ce(t, end_logits, ei);
    Ok(t.add(cs, ce_))
}

/// Dispatch the right loss for a forward pass against the query's ground
/// truth.
pub fn query_loss(
    t: &mut Tape,
    mc: &ModelConfig,
    out: &QueryOutput,
    q: &RestQuery,
) -> Result<Var> {
    match (&out.head, q.kind) {
        (HeadOutput::Activity(logits), QueryKind::Activity) => {
            let gt = q
                .gt_activities
                .as_ref()
                .ok_or_else(|| Error::InvalidQuery("gt_activities required".into()))?;
            focal_loss(t, *logits, gt, mc.focal_alpha, mc.focal_gamma)
        }
        (HeadOutput::Boxes(boxes), QueryKind::Object) => {
            let gt = q
                .gt_boxes
                .as_ref()
                .ok_or_else(|| Error::InvalidQuery("gt_boxes required".into()))?;
            object_loss(t, *boxes, gt, mc.lambda_l1, mc.lambda_giou)
        }
        (HeadOutput::Time { start, end }, QueryKind::Time) => {
            let gt = q
                .gt_time
                .as_ref()
                .ok_or_else(|| Error::InvalidQuery("gt_time required".into()))?;
            time_loss(t, *start, *end, gt, &q.query_time, mc.fps_default)
        }
        _ => Err(Error::InvalidQuery(
            "head output does not match query kind".into(),
        )),
    }
}

/// Per-video FIFO of the past `p` queries, used by the online continual
/// loss. The oldest entry is ejected when a video's FIFO is full.
#[derive(Debug, Clone, Default)]
pub struct ContinualHeap {
    capacity: usize,
    fifos: BTreeMap<String, VecDeque<RestQuery>>,
}

impl ContinualHeap {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            fifos: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, q: RestQuery) {
        if self.capacity == 0 {
            return;
        }
        let fifo = self.fifos.entry(q.video_id.clone()).or_default();
        if fifo.len() == self.capacity {
            fifo.pop_front();
        }
        fifo.push_back(q);
    }

    /// Entries for one video in insertion order (oldest first).
    pub fn entries(&self, video_id: &str) -> Vec<&RestQuery> {
        self.fifos
            .get(video_id)
            .map(|f| f.iter().collect())
            .unwrap_or_default()
    }

    pub fn clear(&mut self) {
        self.fifos.clear();
    }
}

/// Current loss plus the losses of the stored past queries, each recomputed
/// through `forward_loss` (which must answer from the current memory state).
pub fn continual_loss<F>(
    t: &mut Tape,
    current: Var,
    past: &[&RestQuery],
    mut forward_loss: F,
) -> Result<Var>
where
    F: FnMut(&mut Tape, &RestQuery) -> Result<Var>,
{
    let mut total = current;
    for q in past {
        let l = forward_loss(t, q)?;
        total = t.add(total, l);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use rand::Rng;

    // Independent scalar re-implementations (no shared code with the tape).
    mod oracle {
        use crate::types::NormBox;

        pub fn sigmoid(x: f64) -> f64 {
            1.0 / (1.0 + (-x).exp())
        }

        pub fn focal(logits: &[f64], targets: &[u8], alpha: f64, gamma: f64) -> f64 {
            let mut total = 0.0;
            for (x, &y) in logits.iter().zip(targets) {
                let p = sigmoid(*x);
                total += if y == 1 {
                    alpha * (1.0 - p).powf(gamma) * -(p.ln())
                } else {
                    p.powf(gamma) * -((1.0 - p).ln())
                };
            }
            total / logits.len() as f64
        }

        pub fn bce(logits: &[f64], targets: &[u8]) -> f64 {
            let mut total = 0.0;
            for (x, &y) in logits.iter().zip(targets) {
                let p = sigmoid(*x);
                total += if y == 1 { -p.ln() } else { -(1.0 - p).ln() };
            }
            total / logits.len() as f64
        }

        pub fn giou_corner(a: [f64; 4], b: [f64; 4]) -> f64 {
            let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
            let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
            let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
            let inter = iw * ih;
            let union = area(a) + area(b) - inter;
            let iou = if union > 0.0 { inter / union } else { 0.0 };
            let c = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
            if c > 0.0 {
                iou - (c - union) / c
            } else {
                iou
            }
        }

        pub fn object(pred: &[NormBox], gt: &[NormBox], l1w: f64, gw: f64) -> f64 {
            let mut l1 = 0.0;
            let mut gsum = 0.0;
            for (p, g) in pred.iter().zip(gt) {
                l1 += (p.cx - g.cx).abs()
                    + (p.cy - g.cy).abs()
                    + (p.w - g.w).abs()
                    + (p.h - g.h).abs();
                gsum += 1.0 - giou_corner(p.corners(), g.corners());
            }
            l1w * l1 / (4.0 * pred.len() as f64) + gw * gsum / pred.len() as f64
        }

        pub fn cross_entropy(logits: &[f64], idx: usize) -> f64 {
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
            m + z.ln() - logits[idx]
        }
    }

    fn logits_var(t: &mut Tape, vals: &[f64]) -> Var {
        t.constant(Array2::from_shape_vec((1, vals.len()), vals.to_vec()).unwrap())
    }

    fn col_var(t: &mut Tape, vals: &[f64]) -> Var {
        t.constant(Array2::from_shape_vec((vals.len(), 1), vals.to_vec()).unwrap())
    }

    #[test]
    fn focal_reduces_to_bce() {
        let mut rng = seeds::rng(1, 0, 0);
        for _ in 0..100 {
            let c = rng.gen_range(1..10);
            let logits: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let targets: Vec<u8> = (0..c).map(|_| rng.gen_range(0..2)).collect();
            let mut t = Tape::new();
            let lv = logits_var(&mut t, &logits);
            let loss = focal_loss(&mut t, lv, &targets, 1.0, 0.0).unwrap();
            let got = t.scalar(loss);
            assert!((got - oracle::bce(&logits, &targets)).abs() < 1e-9);
        }
    }

    #[test]
    fn focal_saturates_when_confident() {
        let mut t = Tape::new();
        let lv = logits_var(&mut t, &[20.0, -20.0, 20.0]);
        let loss = focal_loss(&mut t, lv, &[1, 0, 1], 0.25, 2.0).unwrap();
        assert!(t.scalar(loss) < 1e-6);
    }

    #[test]
    fn focal_direct_formula_case() {
        let mut t = Tape::new();
        let lv = logits_var(&mut t, &[0.0, 0.0]);
        let loss = focal_loss(&mut t, lv, &[1, 0], 0.25, 2.0).unwrap();
        // 0.25*0.25*ln2 and 0.25*ln2, averaged.
        let expect = (0.25 * 0.25 * std::f64::consts::LN_2 + 0.25 * std::f64::consts::LN_2) / 2.0;
        assert!((t.scalar(loss) - expect).abs() < 1e-12);
        assert!((t.scalar(loss) - oracle::focal(&[0.0, 0.0], &[1, 0], 0.25, 2.0)).abs() < 1e-12);
    }

    #[test]
    fn focal_matches_oracle_randomly() {
        let mut rng = seeds::rng(2, 0, 0);
        for _ in 0..200 {
            let c = rng.gen_range(1..12);
            let logits: Vec<f64> = (0..c).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let targets: Vec<u8> = (0..c).map(|_| rng.gen_range(0..2)).collect();
            let alpha = rng.gen_range(0.05..1.0);
            let gamma = rng.gen_range(0.0..4.0);
            let mut t = Tape::new();
            let lv = logits_var(&mut t, &logits);
            let loss = focal_loss(&mut t, lv, &targets, alpha, gamma).unwrap();
            let want = oracle::focal(&logits, &targets, alpha, gamma);
            assert!((t.scalar(loss) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn giou_closed_forms() {
        assert_eq!(giou([0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]), 1.0);
        assert_eq!(giou([0.0, 0.0, 1.0, 1.0], [1.0, 0.0, 2.0, 1.0]), 0.0);
        let far = giou([0.0, 0.0, 1.0, 1.0], [9.0, 9.0, 10.0, 10.0]);
        assert!((far - -0.98).abs() < 1e-12);
        // Degenerate zero-area: IoU term zero by convention.
        let point = giou([0.5, 0.5, 0.5, 0.5], [0.0, 0.0, 1.0, 1.0]);
        assert!(point <= 0.0);
    }

    #[test]
    fn giou_matches_oracle_randomly() {
        let mut rng = seeds::rng(3, 0, 0);
        let mut draw = move || {
            let x1: f64 = rng.gen_range(0.0..0.8);
            let y1: f64 = rng.gen_range(0.0..0.8);
            let w: f64 = rng.gen_range(0.05..0.2);
            let h: f64 = rng.gen_range(0.05..0.2);
            [x1, y1, x1 + w, y1 + h]
        };
        for _ in 0..200 {
            let a = draw();
            let b = draw();
            assert!((giou(a, b) - oracle::giou_corner(a, b)).abs() < 1e-9);
        }
    }

    #[test]
    fn object_loss_examples() {
        let gt = vec![NormBox::new(0.5, 0.5, 0.3, 0.3)];
        // Perfect prediction: zero loss.
        let mut t = Tape::new();
        let pred = t.constant(Array2::from_shape_vec((1, 4), vec![0.5, 0.5, 0.3, 0.3]).unwrap());
        let loss = object_loss(&mut t, pred, &gt, 5.0, 2.0).unwrap();
        assert!(t.scalar(loss).abs() < 1e-12);
        // L1 term only, every coordinate off by 0.1: 5 * 0.1.
        let mut t = Tape::new();
        let pred = t.constant(Array2::from_shape_vec((1, 4), vec![0.6, 0.6, 0.4, 0.4]).unwrap());
        let loss = object_loss(&mut t, pred, &gt, 5.0, 0.0).unwrap();
        assert!((t.scalar(loss) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn object_loss_matches_oracle_randomly() {
        let mut rng = seeds::rng(5, 0, 0);
        for _ in 0..200 {
            let l = rng.gen_range(1..8);
            let mk_box = |rng: &mut rand_chacha::ChaCha8Rng| {
                NormBox::new(
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.1..0.4),
                    rng.gen_range(0.1..0.4),
                )
            };
            let pred: Vec<NormBox> = (0..l).map(|_| mk_box(&mut rng)).collect();
            let gt: Vec<NormBox> = (0..l).map(|_| mk_box(&mut rng)).collect();
            let arr = Array2::from_shape_fn((l, 4), |(i, j)| match j {
                0 => pred[i].cx,
                1 => pred[i].cy,
                2 => pred[i].w,
                _ => pred[i].h,
            });
            let mut t = Tape::new();
            let pv = t.constant(arr);
            let loss = object_loss(&mut t, pv, &gt, 5.0, 2.0).unwrap();
            let want = oracle::object(&pred, &gt, 5.0, 2.0);
            assert!((t.scalar(loss) - want).abs() < 1e-9, "{} vs {want}", t.scalar(loss));
        }
    }

    #[test]
    fn time_loss_examples() {
        let window = TimeInterval::new(0.0, 9.0).unwrap();
        // Confident one-hot logits at the right indices.
        let mut t = Tape::new();
        let mut s = vec![-20.0; 10];
        s[2] = 20.0;
        let mut e = vec![-20.0; 10];
        e[7] = 20.0;
        let sv = col_var(&mut t, &s);
        let ev = col_var(&mut t, &e);
        let gt = TimeInterval::new(2.0, 7.0).unwrap();
        let loss = time_loss(&mut t, sv, ev, &gt, &window, 1.0).unwrap();
        assert!(t.scalar(loss) < 1e-6);
        // Uniform logits: loss = 2 ln L.
        let mut t = Tape::new();
        let sv = col_var(&mut t, &vec![0.0; 10]);
        let ev = col_var(&mut t, &vec![0.0; 10]);
        let loss = time_loss(&mut t, sv, ev, &gt, &window, 1.0).unwrap();
        assert!((t.scalar(loss) - 2.0 * (10.0f64).ln()).abs() < 1e-9);
        // Window endpoints map to indices (0, L-1).
        assert_eq!(grid_index_of(&window, 1.0, 0.0, 10), 0);
        assert_eq!(grid_index_of(&window, 1.0, 9.0, 10), 9);
        // Ground truth outside the window is rejected.
        let mut t = Tape::new();
        let sv = col_var(&mut t, &vec![0.0; 10]);
        let ev = col_var(&mut t, &vec![0.0; 10]);
        let bad = TimeInterval::new(2.0, 11.0).unwrap();
        assert!(time_loss(&mut t, sv, ev, &bad, &window, 1.0).is_err());
    }

    #[test]
    fn time_loss_matches_ce_oracle() {
        let mut rng = seeds::rng(6, 0, 0);
        for _ in 0..200 {
            let l = rng.gen_range(2..20);
            let window = TimeInterval::new(0.0, (l - 1) as f64).unwrap();
            let s: Vec<f64> = (0..l).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let e: Vec<f64> = (0..l).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let si = rng.gen_range(0..l);
            let ei = rng.gen_range(si..l);
            let gt = TimeInterval::new(si as f64, ei as f64).unwrap();
            let mut t = Tape::new();
            let sv = col_var(&mut t, &s);
            let ev = col_var(&mut t, &e);
            let loss = time_loss(&mut t, sv, ev, &gt, &window, 1.0).unwrap();
            let want = oracle::cross_entropy(&s, si) + oracle::cross_entropy(&e, ei);
            assert!((t.scalar(loss) - want).abs() < 1e-9);
        }
    }

    fn dummy_query(video: &str, id: &str) -> RestQuery {
        RestQuery {
            query_id: id.into(),
            video_id: video.into(),
            kind: QueryKind::Activity,
            query_time: TimeInterval::new(0.0, 10.0).unwrap(),
            property_time: TimeInterval::new(0.0, 10.0).unwrap(),
            activity_input: None,
            object_input: None,
            gt_activities: Some(vec![1, 0]),
            gt_boxes: None,
            gt_time: None,
        }
    }

    #[test]
    fn heap_fifo_semantics() {
        let mut heap = ContinualHeap::new(2);
        assert!(heap.entries("v").is_empty());
        heap.push(dummy_query("v", "a"));
        heap.push(dummy_query("v", "b"));
        heap.push(dummy_query("v", "c"));
        let ids: Vec<&str> = heap.entries("v").iter().map(|q| q.query_id.as_str()).collect();
        assert_eq!(ids, vec!["b", "c"], "oldest ejected, order preserved");
        // Per-video isolation.
        heap.push(dummy_query("w", "x"));
        assert_eq!(heap.entries("v").len(), 2);
        assert_eq!(heap.entries("w").len(), 1);
        // Capacity zero disables storage.
        let mut off = ContinualHeap::new(0);
        off.push(dummy_query("v", "a"));
        assert!(off.entries("v").is_empty());
    }

    #[test]
    fn continual_sums_past_losses() {
        let mut t = Tape::new();
        let current = t.constant(Array2::from_elem((1, 1), 3.0));
        // Empty heap: equals current loss.
        let total = continual_loss(&mut t, current, &[], |_, _| unreachable!()).unwrap();
        assert_eq!(t.scalar(total), 3.0);
        // A duplicate of the current query doubles the loss.
        let q = dummy_query("v", "dup");
        let total = continual_loss(&mut t, current, &[&q], |t, _| {
            Ok(t.constant(Array2::from_elem((1, 1), 3.0)))
        })
        .unwrap();
        assert_eq!(t.scalar(total), 6.0);
    }
}
