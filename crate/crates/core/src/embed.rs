//! Frozen "backbone" and input encoders.
//!
//! The backbone is a seeded random linear projection (identity plus a scaled
//! Gaussian) applied to raw synthetic tokens. It is constructed once from
//! the config seed, never registered with the parameter store, and therefore
//! can never be updated by training.
//!
//! Positional encodings are fixed sinusoidal tables: a per-fps temporal
//! table over absolute video time and a 2-D spatial table over grid cells.
//! Memory tokens receive both exactly once, at write time, guarded by the
//! per-token `pe_applied` flag.

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{init_weight, Linear, ParamGroup, ParamStore};
use crate::seeds;
use crate::tape::{Tape, Var};
use crate::types::{sample_frame_times, ModelConfig, TimeInterval, TokenBlock};

/// Fixed sinusoidal table over frame positions at one target fps.
#[derive(Debug, Clone)]
pub struct PositionalEncoder {
    pub d: usize,
    pub fps: f64,
    pub max_len_s: f64,
    table: Array2<f64>,
}

fn sinusoid_row(pos: f64, d: usize) -> Array1<f64> {
    Array1::from_shape_fn(d, |j| {
        let pair = (j / 2) as f64;
        let rate = (10000.0_f64).powf(2.0 * pair / d as f64);
        if j % 2 == 0 {
            (pos / rate).sin()
        } else {
            (pos / rate).cos()
        }
    })
}

impl PositionalEncoder {
    pub fn new(d: usize, max_len_s: f64, fps: f64) -> Self {
        let positions = (max_len_s * fps).ceil() as usize + 1;
        let mut table = Array2::zeros((positions, d));
        for p in 0..positions {
            table.row_mut(p).assign(&sinusoid_row(p as f64, d));
        }
        Self {
            d,
            fps,
            max_len_s,
            table,
        }
    }

    pub fn len(&self) -> usize {
        self.table.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Table row for an absolute video time.
    pub fn row_at(&self, time_s: f64) -> Result<ndarray::ArrayView1<'_, f64>> {
        let pos = (time_s * self.fps).round() as i64;
        if pos < 0 || pos as usize >= self.table.nrows() {
            return Err(Error::InvalidQuery(format!(
                "time {time_s}s outside the positional table (max {}s)",
                self.max_len_s
            )));
        }
        Ok(self.table.row(pos as usize))
    }

    /// `L x d` encoding of the sampled frame times of `interval`, row `l`
    /// encoding the absolute video time of the `l`-th frame.
    pub fn encode_interval(&self, interval: &TimeInterval) -> Result<Array2<f64>> {
        let times = sample_frame_times(interval, self.fps);
        let mut out = Array2::zeros((times.len(), self.d));
        for (l, &t) in times.iter().enumerate() {
            out.row_mut(l).assign(&self.row_at(t)?);
        }
        Ok(out)
    }
}

/// 2-D sinusoidal encoding over a `grid_h x grid_w` cell grid, row and
/// column halves concatenated; `s x d`, cells row-major.
pub fn spatial_pe_2d(grid_h: usize, grid_w: usize, d: usize) -> Array2<f64> {
    assert_eq!(d % 4, 0, "spatial encoding needs d divisible by 4");
    let half = d / 2;
    let mut out = Array2::zeros((grid_h * grid_w, d));
    for r in 0..grid_h {
        let row_enc = sinusoid_row(r as f64, half);
        for c in 0..grid_w {
            let col_enc = sinusoid_row(c as f64, half);
            let cell = r * grid_w + c;
            for j in 0..half {
                out[(cell, j)] = row_enc[j];
                out[(cell, half + j)] = col_enc[j];
            }
        }
    }
    out
}

/// The frozen backbone and both positional tables.
#[derive(Debug, Clone)]
pub struct FrozenEmbedder {
    /// `d x d` projection, identity plus scaled Gaussian.
    w: Array2<f64>,
    pub d: usize,
    pub s: usize,
    pub pe_time: PositionalEncoder,
    pub pe_time_object: PositionalEncoder,
    pub spatial: Array2<f64>,
}

impl FrozenEmbedder {
    pub fn new(mc: &ModelConfig) -> Self {
        let mut rng = seeds::rng(mc.seed, seeds::STREAM_PARAMS, 0xf0f0);
        let g = init_weight(&mut rng, mc.d, mc.d);
        let mut w = g.mapv(|v| 0.5 * v);
        for i in 0..mc.d {
            w[(i, i)] += 1.0;
        }
        Self {
            w,
            d: mc.d,
            s: mc.s,
            pe_time: PositionalEncoder::new(mc.d, mc.max_video_len_s, mc.fps_default),
            pe_time_object: PositionalEncoder::new(mc.d, mc.max_video_len_s, mc.fps_object),
            spatial: spatial_pe_2d(mc.grid_h, mc.grid_w, mc.d),
        }
    }

    fn project(&self, block: &TokenBlock) -> TokenBlock {
        let data = block.data.dot(&self.w);
        TokenBlock {
            video_id: block.video_id.clone(),
            data,
            prov: block.prov.clone(),
            pe_applied: vec![false; block.len()],
        }
    }

    /// Embed a clip of frame blocks into `k = frames * s` tokens.
    pub fn embed_clip(&self, frames: &[TokenBlock]) -> Result<TokenBlock> {
        for f in frames {
            if f.len() != self.s {
                return Err(Error::WrongTokenCount {
                    expected: self.s,
                    actual: f.len(),
                });
            }
            if f.dim() != self.d {
                return Err(Error::DimensionMismatch {
                    what: "clip frame",
                    expected: self.d,
                    actual: f.dim(),
                });
            }
        }
        let refs: Vec<&TokenBlock> = frames.iter().collect();
        Ok(self.project(&TokenBlock::concat(&refs)))
    }

    /// Embed an object patch (one pseudo-frame of `s` tokens) with the same
    /// projection as clips.
    pub fn embed_object(&self, patch: &TokenBlock) -> Result<TokenBlock> {
        if patch.len() != self.s {
            return Err(Error::WrongTokenCount {
                expected: self.s,
                actual: patch.len(),
            });
        }
        if patch.dim() != self.d {
            return Err(Error::DimensionMismatch {
                what: "object patch",
                expected: self.d,
                actual: patch.dim(),
            });
        }
        Ok(self.project(patch))
    }

    /// Add spatial and (absolute-time) temporal encodings to every token
    /// that has not received them yet, in place. Tokens entering memory go
    /// through here exactly once.
    pub fn apply_pe(&self, block: &mut TokenBlock) -> Result<()> {
        for i in 0..block.len() {
            if block.pe_applied[i] {
                continue;
            }
            let p = block.prov[i];
            let cell = p.spatial_cell as usize;
            if cell >= self.spatial.nrows() {
                return Err(Error::DimensionMismatch {
                    what: "spatial cell",
                    expected: self.spatial.nrows(),
                    actual: cell,
                });
            }
            let temporal = self.pe_time.row_at(p.video_time.max(0.0))?.to_owned();
            let mut row = block.data.row_mut(i);
            row += &self.spatial.row(cell);
            row += &temporal;
            block.pe_applied[i] = true;
        }
        Ok(())
    }

    /// Temporal encoding matrix for decoder queries at the given fps table.
    pub fn temporal_pe(&self, interval: &TimeInterval, object_fps: bool) -> Result<Array2<f64>> {
        if object_fps {
            self.pe_time_object.encode_interval(interval)
        } else {
            self.pe_time.encode_interval(interval)
        }
    }

    /// Checksum over the frozen projection, for frozen-ness assertions.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in self.w.iter() {
            h.update(v.to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }
}

/// Trainable feed-forward encoding of the multi-hot activity vector.
#[derive(Debug, Clone)]
pub struct ActivityEncoder {
    pub lin: Linear,
    pub c: usize,
}

impl ActivityEncoder {
    pub fn new(store: &mut ParamStore, mc: &ModelConfig) -> Self {
        let mut rng = seeds::rng(mc.seed, seeds::STREAM_PARAMS, 0xac71);
        Self {
            lin: Linear::new(
                store,
                &mut rng,
                ParamGroup::Rest,
                "activity_enc",
                mc.c_classes,
                mc.d,
            ),
            c: mc.c_classes,
        }
    }

    /// `1 x d` token from a multi-hot vector of length C.
    pub fn encode(&self, t: &mut Tape, store: &ParamStore, onehot: &[u8]) -> Result<Var> {
        if onehot.len() != self.c {
            return Err(Error::DimensionMismatch {
                what: "activity vector",
                expected: self.c,
                actual: onehot.len(),
            });
        }
        let row = Array2::from_shape_fn((1, self.c), |(_, j)| onehot[j] as f64);
        let v = t.constant(row);
        Ok(self.lin.forward(t, store, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_video, object_patch, SignatureBank, Split};

    fn mc() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn clip_embedding_shapes() {
        let mc = mc();
        let emb = FrozenEmbedder::new(&mc);
        let bank = SignatureBank::generate(&mc, 1, 4.0);
        let v = generate_video(&mc, &bank, "v", Split::Train, 1, 30.0, 2).unwrap();
        let frames: Vec<TokenBlock> = (0..mc.t_clip).map(|f| v.frame_block(f)).collect();
        let clip = emb.embed_clip(&frames).unwrap();
        assert_eq!(clip.len(), mc.t_clip * mc.s); // k = T * s
        assert_eq!(clip.dim(), mc.d);
        let single = emb.embed_clip(&frames[..1]).unwrap();
        assert_eq!(single.len(), mc.s);
        // Frozen determinism.
        let clip2 = emb.embed_clip(&frames).unwrap();
        assert_eq!(clip.data, clip2.data);
    }

    #[test]
    fn object_embedding_distinguishes_ids() {
        let mc = mc();
        let emb = FrozenEmbedder::new(&mc);
        let bank = SignatureBank::generate(&mc, 5, 4.0);
        let mut rng = seeds::rng(5, seeds::STREAM_QUERIES, 0);
        let a = emb
            .embed_object(&object_patch(&mc, &bank, "v", 0, &mut rng))
            .unwrap();
        let b = emb
            .embed_object(&object_patch(&mc, &bank, "v", 1, &mut rng))
            .unwrap();
        assert_eq!(a.len(), mc.s);
        let mean = |x: &TokenBlock| x.data.mean_axis(ndarray::Axis(0)).unwrap();
        let (ma, mb) = (mean(&a), mean(&b));
        let cos = ma.dot(&mb) / (ma.dot(&ma).sqrt() * mb.dot(&mb).sqrt());
        assert!(cos < 0.5, "cosine {cos}");
    }

    #[test]
    fn rejects_wrong_shapes() {
        let mc = mc();
        let emb = FrozenEmbedder::new(&mc);
        let bank = SignatureBank::generate(&mc, 1, 4.0);
        let v = generate_video(&mc, &bank, "v", Split::Train, 1, 10.0, 1).unwrap();
        let mut patch = v.frame_block(0);
        patch.data = patch.data.slice(ndarray::s![..4, ..]).to_owned();
        patch.prov.truncate(4);
        patch.pe_applied.truncate(4);
        assert!(emb.embed_object(&patch).is_err());
    }

    #[test]
    fn temporal_pe_examples() {
        let mc = mc();
        let pe = PositionalEncoder::new(mc.d, mc.max_video_len_s, 1.0);
        let e = pe
            .encode_interval(&TimeInterval::new(0.0, 3.0).unwrap())
            .unwrap();
        assert_eq!(e.dim(), (4, mc.d));
        for l in 0..4 {
            assert_eq!(e.row(l), pe.row_at(l as f64).unwrap());
        }
        // Statelessness: same absolute times, same rows.
        let e2 = pe
            .encode_interval(&TimeInterval::new(0.0, 3.0).unwrap())
            .unwrap();
        assert_eq!(e, e2);
        // Out of range errors.
        assert!(pe
            .encode_interval(&TimeInterval::new(0.0, mc.max_video_len_s + 10.0).unwrap())
            .is_err());
    }

    #[test]
    fn temporal_pe_injective_over_table() {
        let pe = PositionalEncoder::new(32, 200.0, 1.0);
        for a in 0..pe.len() {
            for b in (a + 1)..pe.len() {
                let ra = pe.row_at(a as f64).unwrap();
                let rb = pe.row_at(b as f64).unwrap();
                let diff: f64 = ra.iter().zip(rb.iter()).map(|(x, y)| (x - y).abs()).sum();
                assert!(diff > 1e-9, "rows {a} and {b} collide");
            }
        }
    }

    #[test]
    fn spatial_pe_distinct_and_transpose_bookkeeping() {
        let d = 64;
        let a = spatial_pe_2d(3, 3, d);
        assert_eq!(a.nrows(), 9);
        for i in 0..9 {
            for j in (i + 1)..9 {
                let diff: f64 = a
                    .row(i)
                    .iter()
                    .zip(a.row(j).iter())
                    .map(|(x, y)| (x - y).abs())
                    .sum();
                assert!(diff > 1e-9, "cells {i} and {j} collide");
            }
        }
        // Index bookkeeping: transposing a square grid swaps the row/col
        // halves of the corresponding transposed cell.
        let half = d / 2;
        for r in 0..3 {
            for c in 0..3 {
                let orig = a.row(r * 3 + c);
                let swapped = a.row(c * 3 + r);
                for j in 0..half {
                    assert_eq!(orig[j], swapped[half + j]);
                    assert_eq!(orig[half + j], swapped[j]);
                }
            }
        }
    }

    #[test]
    fn pe_applied_exactly_once() {
        let mc = mc();
        let emb = FrozenEmbedder::new(&mc);
        let bank = SignatureBank::generate(&mc, 2, 4.0);
        let v = generate_video(&mc, &bank, "v", Split::Train, 2, 20.0, 1).unwrap();
        let mut block = emb.embed_clip(&[v.frame_block(3)]).unwrap();
        let raw = block.data.clone();
        emb.apply_pe(&mut block).unwrap();
        assert!(block.pe_applied.iter().all(|&b| b));
        let once = block.data.clone();
        // Second application is a no-op thanks to the flag.
        emb.apply_pe(&mut block).unwrap();
        assert_eq!(block.data, once);
        // And the delta is exactly spatial + temporal rows.
        for i in 0..block.len() {
            let p = block.prov[i];
            let expect = &raw.row(i)
                + &emb.spatial.row(p.spatial_cell as usize)
                + &emb.pe_time.row_at(p.video_time).unwrap();
            let got = block.data.row(i);
            for (e, g) in expect.iter().zip(got.iter()) {
                assert!((e - g).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn activity_encoder_linearity() {
        let mc = mc();
        let mut store = ParamStore::new();
        let enc = ActivityEncoder::new(&mut store, &mc);
        let mut t = Tape::new();
        let zero = enc.encode(&mut t, &store, &vec![0u8; mc.c_classes]).unwrap();
        // Zero bias at init: all-zero input maps to the zero vector.
        assert!(t.value(zero).iter().all(|&v| v == 0.0));
        let mut onehot = vec![0u8; mc.c_classes];
        onehot[3] = 1;
        let e3 = enc.encode(&mut t, &store, &onehot).unwrap();
        let w = store.value(enc.lin.w);
        for j in 0..mc.d {
            assert!((t.value(e3)[(0, j)] - w[(3, j)]).abs() < 1e-12);
        }
        // Wrong length errors.
        assert!(enc.encode(&mut t, &store, &[1, 0]).is_err());
    }
}
