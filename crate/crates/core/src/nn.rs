//! Trainable-parameter store and transformer building blocks shared by the
//! sampler scorer and the query encoder-decoder.
//!
//! Parameters live in a flat [`ParamStore`] split into two groups with
//! separate learning rates: the neural sampler's scorer and everything else.
//! The frozen embedder never registers here, so it can never receive
//! optimizer updates.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Sampler,
    Rest,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
    pub vel: Array2<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Array2<f64>) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.params.iter().any(|p| p.name == name),
            "duplicate param name {name}"
        );
        let grad = Array2::zeros(value.raw_dim());
        let vel = Array2::zeros(value.raw_dim());
        self.params.push(Param {
            name,
            group,
            value,
            grad,
            vel,
        });
        self.params.len() - 1
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id].value
    }

    /// Bind a parameter onto a tape (deduplicated per tape).
    pub fn var(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(id, &self.params[id].value)
    }

    /// Pull accumulated gradients off a finished tape into the store.
    pub fn absorb(&mut self, tape: &Tape) {
        for (id, g) in tape.param_grads() {
            self.params[id].grad += g;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// One SGD-with-momentum step. Gradients are scaled by `grad_scale`
    /// (1 / batch size) before the velocity update.
    pub fn sgd_step(&mut self, lr_sampler: f64, lr_rest: f64, momentum: f64, grad_scale: f64) {
        for p in &mut self.params {
            let lr = match p.group {
                ParamGroup::Sampler => lr_sampler,
                ParamGroup::Rest => lr_rest,
            };
            ndarray::Zip::from(&mut p.vel)
                .and(&p.grad)
                .for_each(|v, &g| *v = momentum * *v + g * grad_scale);
            ndarray::Zip::from(&mut p.value)
                .and(&p.vel)
                .for_each(|x, &v| *x -= lr * v);
        }
    }

    pub fn group_grad_norm(&self, group: ParamGroup) -> f64 {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.grad.iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// SHA-256 over every parameter's bytes, for frozen-ness and
    /// determinism checks.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for v in p.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    pub fn ids_in_group(&self, group: ParamGroup) -> Vec<ParamId> {
        (0..self.params.len())
            .filter(|&i| self.params[i].group == group)
            .collect()
    }
}

/// Gaussian init scaled by 1/sqrt(fan_in).
pub fn init_weight(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let scale = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        // Box-Muller from two uniforms.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * scale
    })
}

/// Affine map `x . w + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        group: ParamGroup,
        name: &str,
        din: usize,
        dout: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), group, init_weight(rng, din, dout));
        let b = store.add(format!("{name}.b"), group, Array2::zeros((1, dout)));
        Self { w, b }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = store.var(t, self.w);
        let b = store.var(t, self.b);
        let xw = t.matmul(x, w);
        t.add_row(xw, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, group: ParamGroup, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.g"), group, Array2::ones((1, d)));
        let bias = store.add(format!("{name}.b"), group, Array2::zeros((1, d)));
        Self { gain, bias }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = store.var(t, self.gain);
        let b = store.var(t, self.bias);
        let n = t.layer_norm_rows(x);
        let scaled = t.mul_row(n, g);
        t.add_row(scaled, b)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        group: ParamGroup,
        name: &str,
        d: usize,
        n_heads: usize,
    ) -> Self {
        assert_eq!(d % n_heads, 0);
        Self {
            wq: Linear::new(store, rng, group, &format!("{name}.wq"), d, d),
            wk: Linear::new(store, rng, group, &format!("{name}.wk"), d, d),
            wv: Linear::new(store, rng, group, &format!("{name}.wv"), d, d),
            wo: Linear::new(store, rng, group, &format!("{name}.wo"), d, d),
            n_heads,
            d,
        }
    }

    /// Attend from `q_in` (n_q x d) over `kv_in` (n_kv x d).
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, q_in: Var, kv_in: Var) -> Var {
        let dh = self.d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.wq.forward(t, store, q_in);
        let k = self.wk.forward(t, store, kv_in);
        let v = self.wv.forward(t, store, kv_in);
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = t.slice_cols(q, h * dh, dh);
            let kh = t.slice_cols(k, h * dh, dh);
            let vh = t.slice_cols(v, h * dh, dh);
            let kt = t.transpose(kh);
            let logits = t.matmul(qh, kt);
            let scaled = t.affine(logits, scale, 0.0);
            let attn = t.softmax_rows(scaled);
            heads.push(t.matmul(attn, vh));
        }
        let merged = t.concat_cols(&heads);
        self.wo.forward(t, store, merged)
    }
}

/// Pre-norm encoder layer: self-attention then feed-forward, both residual.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        group: ParamGroup,
        name: &str,
        d: usize,
        n_heads: usize,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, group, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(store, rng, group, &format!("{name}.attn"), d, n_heads),
            ln2: LayerNorm::new(store, group, &format!("{name}.ln2"), d),
            ff1: Linear::new(store, rng, group, &format!("{name}.ff1"), d, 4 * d),
            ff2: Linear::new(store, rng, group, &format!("{name}.ff2"), 4 * d, d),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let n = self.ln1.forward(t, store, x);
        let a = self.attn.forward(t, store, n, n);
        let x = t.add(x, a);
        let n = self.ln2.forward(t, store, x);
        let h = self.ff1.forward(t, store, n);
        let h = t.gelu(h);
        let h = self.ff2.forward(t, store, h);
        t.add(x, h)
    }
}

/// Pre-norm decoder layer: self-attention, cross-attention over the encoder
/// output, feed-forward; all residual.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        group: ParamGroup,
        name: &str,
        d: usize,
        n_heads: usize,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, group, &format!("{name}.ln1"), d),
            self_attn: MultiHeadAttention::new(store, rng, group, &format!("{name}.sa"), d, n_heads),
            ln2: LayerNorm::new(store, group, &format!("{name}.ln2"), d),
            cross_attn: MultiHeadAttention::new(store, rng, group, &format!("{name}.ca"), d, n_heads),
            ln3: LayerNorm::new(store, group, &format!("{name}.ln3"), d),
            ff1: Linear::new(store, rng, group, &format!("{name}.ff1"), d, 4 * d),
            ff2: Linear::new(store, rng, group, &format!("{name}.ff2"), 4 * d, d),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var, enc: Var) -> Var {
        let n = self.ln1.forward(t, store, x);
        let a = self.self_attn.forward(t, store, n, n);
        let x = t.add(x, a);
        let n = self.ln2.forward(t, store, x);
        let a = self.cross_attn.forward(t, store, n, enc);
        let x = t.add(x, a);
        let n = self.ln3.forward(t, store, x);
        let h = self.ff1.forward(t, store, n);
        let h = t.gelu(h);
        let h = self.ff2.forward(t, store, h);
        t.add(x, h)
    }
}

const CKPT_MAGIC: [u8; 4] = *b"VMCK";
const CKPT_VERSION: u32 = 1;

/// Serialize every parameter (name, group, shape, f64 LE payload) preceded
/// by an arbitrary metadata blob (the model config as JSON).
pub fn write_params<W: Write>(w: &mut W, meta: &[u8], store: &ParamStore) -> Result<()> {
    w.write_all(&CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta)?;
    w.write_all(&(store.params.len() as u32).to_le_bytes())?;
    for p in &store.params {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[match p.group {
            ParamGroup::Sampler => 0u8,
            ParamGroup::Rest => 1u8,
        }])?;
        w.write_all(&(p.value.nrows() as u32).to_le_bytes())?;
        w.write_all(&(p.value.ncols() as u32).to_le_bytes())?;
        for v in p.value.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], section: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Truncated {
        section,
        needed: buf.len(),
    })
}

/// Read a parameter dump. Returns the metadata blob and the parameters in
/// stored order.
pub fn read_params<R: Read>(
    r: &mut R,
) -> Result<(Vec<u8>, Vec<(String, ParamGroup, Array2<f64>)>)> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(Error::BadMagic {
            expected: CKPT_MAGIC,
            found: magic,
        });
    }
    let mut b4 = [0u8; 4];
    read_exact_or(r, &mut b4, "version")?;
    let version = u32::from_le_bytes(b4);
    if version != CKPT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CKPT_VERSION,
        });
    }
    read_exact_or(r, &mut b4, "meta len")?;
    let meta_len = u32::from_le_bytes(b4) as usize;
    let mut meta = vec![0u8; meta_len];
    read_exact_or(r, &mut meta, "meta")?;
    read_exact_or(r, &mut b4, "param count")?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        read_exact_or(r, &mut b2, "name len")?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        read_exact_or(r, &mut name, "name")?;
        let mut gb = [0u8; 1];
        read_exact_or(r, &mut gb, "group")?;
        let group = match gb[0] {
            0 => ParamGroup::Sampler,
            _ => ParamGroup::Rest,
        };
        read_exact_or(r, &mut b4, "rows")?;
        let rows = u32::from_le_bytes(b4) as usize;
        read_exact_or(r, &mut b4, "cols")?;
        let cols = u32::from_le_bytes(b4) as usize;
        let mut data = vec![0u8; rows * cols * 8];
        read_exact_or(r, &mut data, "payload")?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = Array2::from_shape_vec((rows, cols), values).expect("shape");
        out.push((String::from_utf8_lossy(&name).into_owned(), group, arr));
    }
    Ok((meta, out))
}

/// Overwrite store values from a dump, matching strictly by name and shape.
pub fn restore_params(
    store: &mut ParamStore,
    loaded: Vec<(String, ParamGroup, Array2<f64>)>,
) -> Result<()> {
    if loaded.len() != store.params.len() {
        return Err(Error::InvalidConfig(format!(
            "checkpoint has {} params, model has {}",
            loaded.len(),
            store.params.len()
        )));
    }
    for (name, group, value) in loaded {
        let p = store
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown param {name}")))?;
        if p.group != group || p.value.dim() != value.dim() {
            return Err(Error::InvalidConfig(format!("param {name} mismatch")));
        }
        p.value = value;
    }
    Ok(())
}
