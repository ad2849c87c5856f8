//! Differentiable neural sampler.
//!
//! Candidates are the current `m` memory tokens plus the `k` clip tokens. A
//! small transformer encoder and a one-layer score head assign one scalar
//! per token; Gumbel noise perturbs the scores; the top `m` perturbed scores
//! are kept. Training uses a straight-through estimator: the forward pass
//! gathers the hard winners, the backward pass flows through the relaxed
//! top-m weights (successive temperature softmaxes with an accumulated
//! log(1 - a) mask).
//!
//! The uniform-random arm of the sampling ablation replaces the learned
//! scores with zeros, which under Gumbel perturbation is exactly a uniform
//! random permutation.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embed::FrozenEmbedder;
use crate::error::{Error, Result};
use crate::nn::{EncoderLayer, Linear, ParamGroup, ParamStore};
use crate::seeds;
use crate::tape::{Tape, Var};
use crate::types::{ModelConfig, SamplerKind, TokenBlock};

/// Hard indices plus the relaxed selection-weight matrix of one sample call.
#[derive(Debug, Clone)]
pub struct SamplerSelection {
    /// `m` distinct candidate indices, descending perturbed score, ties to
    /// the lower index.
    pub hard_indices: Vec<usize>,
    /// `m x (m+k)` nonnegative rows, each summing to 1.
    pub relaxed_weights: Array2<f64>,
    pub temperature: f64,
    pub noise_seed: u64,
}

/// Scorer: one encoder layer over the candidate set followed by a one-layer
/// MLP producing a scalar per token.
#[derive(Debug, Clone)]
pub struct Scorer {
    pub encoder: Vec<EncoderLayer>,
    pub head: Linear,
    pub d: usize,
}

/// Scorer depth; the sampler's internal transformer uses a single layer at
/// this scale.
pub const SCORER_LAYERS: usize = 1;

impl Scorer {
    pub fn new(store: &mut ParamStore, mc: &ModelConfig) -> Self {
        let mut rng = seeds::rng(mc.seed, seeds::STREAM_PARAMS, 0x5c0e);
        let encoder = (0..SCORER_LAYERS)
            .map(|i| {
                EncoderLayer::new(
                    store,
                    &mut rng,
                    ParamGroup::Sampler,
                    &format!("scorer.enc{i}"),
                    mc.d,
                    mc.n_heads,
                )
            })
            .collect();
        let head = Linear::new(store, &mut rng, ParamGroup::Sampler, "scorer.head", mc.d, 1);
        Self {
            encoder,
            head,
            d: mc.d,
        }
    }

    /// One score per candidate token, `n x 1`.
    pub fn score(&self, t: &mut Tape, store: &ParamStore, tokens: Var) -> Var {
        let mut x = tokens;
        for layer in &self.encoder {
            x = layer.forward(t, store, x);
        }
        self.head.forward(t, store, x)
    }
}

/// Score a candidate block, enforcing the candidate-count contract.
pub fn score_tokens(
    t: &mut Tape,
    store: &ParamStore,
    scorer: &Scorer,
    candidates: &TokenBlock,
    expected: usize,
) -> Result<Var> {
    if candidates.len() != expected {
        return Err(Error::WrongTokenCount {
            expected,
            actual: candidates.len(),
        });
    }
    if candidates.dim() != scorer.d {
        return Err(Error::DimensionMismatch {
            what: "candidate tokens",
            expected: scorer.d,
            actual: candidates.dim(),
        });
    }
    let v = t.constant(candidates.data.clone());
    Ok(scorer.score(t, store, v))
}

/// Standard Gumbel(0,1) draws from a dedicated seeded stream.
pub fn gumbel_noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(1e-300..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

/// `perturbed_i = score_i + g_i`.
pub fn gumbel_perturb(scores: &[f64], seed: u64) -> Vec<f64> {
    let g = gumbel_noise(scores.len(), seed);
    scores.iter().zip(g).map(|(s, g)| s + g).collect()
}

/// Indices of the `m` largest values, descending, ties to the lower index.
pub fn hard_top_m(perturbed: &[f64], m: usize) -> Result<Vec<usize>> {
    if m > perturbed.len() {
        return Err(Error::WrongTokenCount {
            expected: m,
            actual: perturbed.len(),
        });
    }
    let mut idx: Vec<usize> = (0..perturbed.len()).collect();
    idx.sort_by(|&a, &b| {
        perturbed[b]
            .partial_cmp(&perturbed[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    idx.truncate(m);
    Ok(idx)
}

/// Relaxed top-m on the tape: `m` softmax rounds at temperature `tau`; after
/// each round the accumulated `ln(1 - a)` mask suppresses re-selection.
/// Input `perturbed` is `1 x n`; output is `m x n` with rows summing to 1.
pub fn relaxed_top_m(t: &mut Tape, perturbed: Var, m: usize, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "tau must be positive, got {tau}"
        )));
    }
    let mut alpha = perturbed;
    let mut rows = Vec::with_capacity(m);
    for round in 0..m {
        let scaled = t.affine(alpha, 1.0 / tau, 0.0);
        let a = t.softmax_rows(scaled);
        rows.push(a);
        if round + 1 < m {
            let mask = t.ln_one_minus(a);
            alpha = t.add(alpha, mask);
        }
    }
    Ok(t.concat_rows(&rows))
}

/// Temperature schedule: linear decay from `temperature_start` to
/// `temperature_end` over `temperature_decay_steps`, constant after.
pub fn temperature_at(step: u64, mc: &ModelConfig) -> f64 {
    if mc.temperature_decay_steps == 0 || step >= mc.temperature_decay_steps {
        return mc.temperature_end;
    }
    let frac = step as f64 / mc.temperature_decay_steps as f64;
    mc.temperature_start + (mc.temperature_end - mc.temperature_start) * frac
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Hard selection, no gradient path.
    Infer,
    /// Straight-through: hard forward, relaxed backward.
    Train,
    /// Fully relaxed forward (`weights . candidates`); the surrogate whose
    /// gradients the straight-through estimator reuses.
    Soft,
}

/// Result of one sampler invocation.
pub struct SampleOutcome {
    /// The new hard memory block: exactly `m` tokens, provenance copied from
    /// the selected candidates, positional encodings applied exactly once.
    pub memory: TokenBlock,
    /// Tape node carrying the new memory values (hard for Infer/Train, soft
    /// mixture for Soft).
    pub memory_var: Var,
    pub selection: SamplerSelection,
}

/// Run the sampler over `m` memory tokens and `k` clip tokens, producing the
/// next memory state.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    t: &mut Tape,
    store: &ParamStore,
    scorer: &Scorer,
    emb: &FrozenEmbedder,
    mc: &ModelConfig,
    memory: &TokenBlock,
    clip: &TokenBlock,
    tau: f64,
    mode: SampleMode,
    noise_seed: u64,
) -> Result<SampleOutcome> {
    if memory.len() != mc.m {
        return Err(Error::WrongTokenCount {
            expected: mc.m,
            actual: memory.len(),
        });
    }
    if memory.dim() != mc.d || (!clip.is_empty() && clip.dim() != mc.d) {
        return Err(Error::DimensionMismatch {
            what: "sampler inputs",
            expected: mc.d,
            actual: if memory.dim() != mc.d {
                memory.dim()
            } else {
                clip.dim()
            },
        });
    }
    debug_assert!(
        memory.pe_applied.iter().all(|&b| b),
        "memory tokens must carry positional encodings"
    );
    let candidates = TokenBlock::concat(&[memory, clip]);
    let n = candidates.len();

    // Scores over the raw candidate mix (memory tokens as stored, clip
    // tokens straight off the frozen backbone).
    let scores_var = match mc.sampler_kind {
        SamplerKind::Neural => {
            let v = t.constant(candidates.data.clone());
            scorer.score(t, store, v)
        }
        SamplerKind::Random => t.constant(Array2::zeros((n, 1))),
    };

    // Perturb. Inference is noise-free unless configured otherwise; the
    // random arm always needs noise (zero scores would otherwise collapse
    // to the tie-break order).
    let noisy = match mode {
        SampleMode::Train | SampleMode::Soft => true,
        SampleMode::Infer => mc.infer_noise || mc.sampler_kind == SamplerKind::Random,
    };
    let perturbed_var = {
        let row = t.transpose(scores_var);
        if noisy {
            let g = Array2::from_shape_vec((1, n), gumbel_noise(n, noise_seed)).unwrap();
            t.add_const(row, &g)
        } else {
            row
        }
    };
    let perturbed: Vec<f64> = t.value(perturbed_var).row(0).to_vec();
    let hard = hard_top_m(&perturbed, mc.m)?;
    let weights_var = relaxed_top_m(t, perturbed_var, mc.m, tau)?;

    // Candidates with positional encodings applied to the not-yet-encoded
    // (clip) rows; hard selection from this block equals selecting raw
    // tokens and encoding the newly selected ones afterwards.
    let mut cand_pe = candidates.clone();
    emb.apply_pe(&mut cand_pe)?;
    let cand_pe_var = t.constant(cand_pe.data.clone());

    let memory_var = match mode {
        SampleMode::Infer | SampleMode::Train => t.st_select(cand_pe_var, weights_var, &hard),
        SampleMode::Soft => t.matmul(weights_var, cand_pe_var),
    };

    let mut new_memory = cand_pe.gather(&hard);
    if mode == SampleMode::Soft {
        // The soft surrogate's visible block carries the mixture values.
        new_memory.data = t.value(memory_var).clone();
    }
    let selection = SamplerSelection {
        hard_indices: hard,
        relaxed_weights: t.value(weights_var).clone(),
        temperature: tau,
        noise_seed,
    };
    Ok(SampleOutcome {
        memory: new_memory,
        memory_var,
        selection,
    })
}
