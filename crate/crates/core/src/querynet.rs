//! Query-conditioned encoder-decoder and prediction heads.
//!
//! The stored memory order is interpreted as `nf = m / s` pseudo-frame
//! blocks of `s` tokens. For queries that supply an object, each block is
//! multiplied element-wise (token-position-wise, per dimension) with the
//! object block and the raw object block is appended; object queries pass
//! memory unfused with the activity token appended; time queries append the
//! activity token after fusion.
//!
//! Decoder queries are initialized from the video-level temporal positional
//! encoding of the window being decoded: the property window for activity
//! and object queries, the query window for time queries.

use serde::{Deserialize, Serialize};

use crate::embed::{ActivityEncoder, FrozenEmbedder};
use crate::error::{Error, Result};
use crate::nn::{
    read_params, restore_params, write_params, DecoderLayer, EncoderLayer, LayerNorm, Linear,
    ParamGroup, ParamStore,
};
use crate::sampler::Scorer;
use crate::seeds;
use crate::tape::{Tape, Var};
use crate::types::{ModelConfig, QueryKind, RestQuery, TimeInterval};

/// Row bookkeeping for an assembled encoder input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub kind: QueryKind,
    /// Leading rows holding (fused or raw) memory tokens.
    pub memory_rows: usize,
    /// Rows holding the appended raw object block.
    pub object_rows: usize,
    /// Trailing activity-token rows (0 or 1).
    pub activity_rows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowRole {
    Memory,
    Object,
    Activity,
}

impl InputLayout {
    pub fn total(&self) -> usize {
        self.memory_rows + self.object_rows + self.activity_rows
    }

    /// Which role a given encoder row plays.
    pub fn role_of(&self, row: usize) -> RowRole {
        if row < self.memory_rows {
            RowRole::Memory
        } else if row < self.memory_rows + self.object_rows {
            RowRole::Object
        } else {
            RowRole::Activity
        }
    }
}

/// Assembled encoder input: tape node plus layout descriptor.
#[derive(Debug)]
pub struct AssembledInput {
    pub tokens: Var,
    pub layout: InputLayout,
}

/// Build the query-specific encoder input from the (new) memory tokens.
pub fn assemble_input(
    t: &mut Tape,
    mc: &ModelConfig,
    kind: QueryKind,
    memory: Var,
    object: Option<Var>,
    activity: Option<Var>,
) -> Result<AssembledInput> {
    let (m, s) = (mc.m, mc.s);
    if m % s != 0 {
        return Err(Error::InvalidConfig(format!(
            "memory ({m}) does not tile into pseudo-frames of {s}"
        )));
    }
    let nf = m / s;
    let need = |opt: Option<Var>, what: &str| {
        opt.ok_or_else(|| Error::InvalidQuery(format!("{what} required for {} query", kind.name())))
    };
    let fuse = |t: &mut Tape, obj: Var| -> Vec<Var> {
        let mut parts = Vec::with_capacity(nf + 1);
        for b in 0..nf {
            let block = t.slice_rows(memory, b * s, s);
            parts.push(t.mul(block, obj));
        }
        parts.push(obj);
        parts
    };
    let (tokens, layout) = match kind {
        QueryKind::Activity => {
            let obj = need(object, "object_input")?;
            let parts = fuse(t, obj);
            (
                t.concat_rows(&parts),
                InputLayout {
                    kind,
                    memory_rows: m,
                    object_rows: s,
                    activity_rows: 0,
                },
            )
        }
        QueryKind::Object => {
            let act = need(activity, "activity_input")?;
            (
                t.concat_rows(&[memory, act]),
                InputLayout {
                    kind,
                    memory_rows: m,
                    object_rows: 0,
                    activity_rows: 1,
                },
            )
        }
        QueryKind::Time => {
            let obj = need(object, "object_input")?;
            let act = need(activity, "activity_input")?;
            let mut parts = fuse(t, obj);
            parts.push(act);
            (
                t.concat_rows(&parts),
                InputLayout {
                    kind,
                    memory_rows: m,
                    object_rows: s,
                    activity_rows: 1,
                },
            )
        }
    };
    Ok(AssembledInput { tokens, layout })
}

/// Shared transformer encoder-decoder and the three prediction heads.
#[derive(Debug, Clone)]
pub struct QueryNet {
    pub enc_layers: Vec<EncoderLayer>,
    pub dec_layers: Vec<DecoderLayer>,
    pub final_ln: LayerNorm,
    pub head_activity: Linear,
    pub head_object: Linear,
    pub head_time_start: Linear,
    pub head_time_end: Linear,
}

impl QueryNet {
    pub fn new(store: &mut ParamStore, mc: &ModelConfig) -> Self {
        let mut rng = seeds::rng(mc.seed, seeds::STREAM_PARAMS, 0x9e7);
        let g = ParamGroup::Rest;
        let enc_layers = (0..mc.n_layers)
            .map(|i| EncoderLayer::new(store, &mut rng, g, &format!("net.enc{i}"), mc.d, mc.n_heads))
            .collect();
        let dec_layers = (0..mc.n_layers)
            .map(|i| DecoderLayer::new(store, &mut rng, g, &format!("net.dec{i}"), mc.d, mc.n_heads))
            .collect();
        let final_ln = LayerNorm::new(store, g, "net.final_ln", mc.d);
        // One-layer MLP heads.
        let head_activity = Linear::new(store, &mut rng, g, "net.head_act", mc.d, mc.c_classes);
        let head_object = Linear::new(store, &mut rng, g, "net.head_obj", mc.d, 4);
        let head_time_start = Linear::new(store, &mut rng, g, "net.head_ts", mc.d, 1);
        let head_time_end = Linear::new(store, &mut rng, g, "net.head_te", mc.d, 1);
        Self {
            enc_layers,
            dec_layers,
            final_ln,
            head_activity,
            head_object,
            head_time_start,
            head_time_end,
        }
    }

    /// Self-attention encoding; output token count equals input count.
    pub fn encode(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for layer in &self.enc_layers {
            h = layer.forward(t, store, h);
        }
        h
    }

    /// Cross-attention decoding against the encoded keys/values; output has
    /// one row per temporal query.
    pub fn decode(&self, t: &mut Tape, store: &ParamStore, encoded: Var, queries: Var) -> Var {
        let mut h = queries;
        for layer in &self.dec_layers {
            h = layer.forward(t, store, h, encoded);
        }
        self.final_ln.forward(t, store, h)
    }

    /// Mean-pool the decoded rows, then a one-layer MLP to C logits.
    pub fn activity_logits(&self, t: &mut Tape, store: &ParamStore, decoded: Var) -> Var {
        let pooled = t.mean_rows(decoded);
        self.head_activity.forward(t, store, pooled)
    }

    /// Per-row one-layer MLP through a sigmoid: `L x 4` boxes in
    /// `(cx, cy, w, h)` form.
    pub fn object_boxes(&self, t: &mut Tape, store: &ParamStore, decoded: Var) -> Var {
        let raw = self.head_object.forward(t, store, decoded);
        t.sigmoid(raw)
    }

    /// Two independent per-row MLPs producing start and end logits (`L x 1`
    /// each).
    pub fn time_logits(&self, t: &mut Tape, store: &ParamStore, decoded: Var) -> (Var, Var) {
        (
            self.head_time_start.forward(t, store, decoded),
            self.head_time_end.forward(t, store, decoded),
        )
    }
}

/// Kind-specific head output of one forward pass.
pub enum HeadOutput {
    /// `1 x C` logits.
    Activity(Var),
    /// `L x 4` normalized boxes.
    Boxes(Var),
    /// `L x 1` start and end logits.
    Time { start: Var, end: Var },
}

pub struct QueryOutput {
    pub decoded: Var,
    pub layout: InputLayout,
    pub head: HeadOutput,
    /// Decoder length and the decoded window it spans.
    pub decode_len: usize,
    pub window: TimeInterval,
}

/// The full trainable model plus its frozen embedder.
pub struct Model {
    pub mc: ModelConfig,
    pub store: ParamStore,
    pub scorer: Scorer,
    pub activity_encoder: ActivityEncoder,
    pub net: QueryNet,
    pub emb: FrozenEmbedder,
}

impl Model {
    pub fn new(mc: ModelConfig) -> Result<Self> {
        mc.validate()?;
        let mut store = ParamStore::new();
        let scorer = Scorer::new(&mut store, &mc);
        let activity_encoder = ActivityEncoder::new(&mut store, &mc);
        let net = QueryNet::new(&mut store, &mc);
        let emb = FrozenEmbedder::new(&mc);
        Ok(Self {
            mc,
            store,
            scorer,
            activity_encoder,
            net,
            emb,
        })
    }

    /// Forward one query against a memory state already on the tape.
    /// Everything the answer depends on is `(memory, query inputs)`; no
    /// video data enters here.
    pub fn forward_query(
        &self,
        t: &mut Tape,
        memory_var: Var,
        query: &RestQuery,
    ) -> Result<QueryOutput> {
        let object_var = match &query.object_input {
            Some(patch) => {
                let embedded = self.emb.embed_object(patch)?;
                Some(t.constant(embedded.data))
            }
            None => None,
        };
        let activity_var = match &query.activity_input {
            Some(vec) => Some(self.activity_encoder.encode(t, &self.store, vec)?),
            None => None,
        };
        let assembled = assemble_input(
            t,
            &self.mc,
            query.kind,
            memory_var,
            object_var,
            activity_var,
        )?;
        let encoded = self.net.encode(t, &self.store, assembled.tokens);
        let (window, object_fps) = match query.kind {
            QueryKind::Activity => (query.property_time, false),
            QueryKind::Object => (query.property_time, true),
            QueryKind::Time => (query.query_time, false),
        };
        let queries_pe = self.emb.temporal_pe(&window, object_fps)?;
        let decode_len = queries_pe.nrows();
        let q = t.constant(queries_pe);
        let decoded = self.net.decode(t, &self.store, encoded, q);
        let head = match query.kind {
            QueryKind::Activity => {
                HeadOutput::Activity(self.net.activity_logits(t, &self.store, decoded))
            }
            QueryKind::Object => HeadOutput::Boxes(self.net.object_boxes(t, &self.store, decoded)),
            QueryKind::Time => {
                let (start, end) = self.net.time_logits(t, &self.store, decoded);
                HeadOutput::Time { start, end }
            }
        };
        Ok(QueryOutput {
            decoded,
            layout: assembled.layout,
            head,
            decode_len,
            window,
        })
    }

    /// Serialize config + all trainable parameters.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::to_vec(&self.mc).expect("config serializes");
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write_params(&mut f, &meta, &self.store)
    }

    /// Rebuild a model from a checkpoint; the frozen embedder is re-derived
    /// from the stored config seed.
    pub fn load(path: &std::path::Path) -> Result<Model> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let (meta, params) = read_params(&mut f)?;
        let mc: ModelConfig = serde_json::from_slice(&meta)
            .map_err(|e| Error::InvalidConfig(format!("checkpoint config: {e}")))?;
        let mut model = Model::new(mc)?;
        restore_params(&mut model.store, params)?;
        Ok(model)
    }

    pub fn digest(&self) -> String {
        self.store.digest()
    }
}
