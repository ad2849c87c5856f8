//! Per-video fixed-size memory storage with exclusive-writer semantics.
//!
//! Every slot holds exactly `m` positionally-encoded tokens at all times.
//! Training iterations go through an [`IterationSession`]: reads see the
//! start-of-iteration state, writes land in per-worker shadow banks, a
//! second writer on the same slot in one iteration is a hard race error,
//! and [`IterationSession::sync`] reconciles the shadows into the shared
//! bank once every worker has reported completion. The race-free batch
//! scheduler makes the single-writer property hold by construction.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::embed::FrozenEmbedder;
use crate::error::{Error, Result};
use crate::seeds;
use crate::synth::SyntheticVideo;
use crate::types::{ModelConfig, TokenBlock, TokenProv};

#[derive(Debug, Clone)]
pub struct MemoryBank {
    pub m: usize,
    pub d: usize,
    slots: BTreeMap<String, TokenBlock>,
    write_epoch: BTreeMap<String, u64>,
    iteration: u64,
}

/// Uniform sample of `m` distinct token indices out of `total`.
pub fn choose_init_indices(total: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    debug_assert!(m <= total);
    // Partial Fisher-Yates over an index vector.
    let mut idx: Vec<usize> = (0..total).collect();
    for i in 0..m {
        let j = rng.gen_range(i..total);
        idx.swap(i, j);
    }
    idx.truncate(m);
    idx
}

impl MemoryBank {
    pub fn new(mc: &ModelConfig) -> Self {
        Self {
            m: mc.m,
            d: mc.d,
            slots: BTreeMap::new(),
            write_epoch: BTreeMap::new(),
            iteration: 0,
        }
    }

    pub fn video_ids(&self) -> Vec<String> {
        self.slots.keys().cloned().collect()
    }

    fn check_block(&self, video_id: &str, block: &TokenBlock) -> Result<()> {
        if block.len() != self.m {
            return Err(Error::WrongTokenCount {
                expected: self.m,
                actual: block.len(),
            });
        }
        if block.dim() != self.d {
            return Err(Error::DimensionMismatch {
                what: "memory slot",
                expected: self.d,
                actual: block.dim(),
            });
        }
        if block.video_id != video_id {
            return Err(Error::InvalidQuery(format!(
                "slot {video_id} offered tokens of video {}",
                block.video_id
            )));
        }
        debug_assert!(
            block.pe_applied.iter().all(|&b| b),
            "memory tokens must be positionally encoded"
        );
        Ok(())
    }

    /// Initialize a slot with `m` tokens drawn uniformly without replacement
    /// from the video's embedded frames.
    pub fn init_random(
        &mut self,
        video: &SyntheticVideo,
        emb: &FrozenEmbedder,
        seed: u64,
    ) -> Result<()> {
        let s = video.s;
        let total = video.total_tokens();
        if total < self.m {
            return Err(Error::VideoTooSmall {
                video_id: video.video_id.clone(),
                available: total,
                needed: self.m,
            });
        }
        let mut rng = seeds::rng(seed, seeds::STREAM_INIT, seeds::id_hash(&video.video_id));
        let mut chosen = choose_init_indices(total, self.m, &mut rng);
        chosen.sort_unstable();
        // Embed only the frames that contributed tokens.
        let frames: BTreeSet<usize> = chosen.iter().map(|&i| i / s).collect();
        let mut embedded: BTreeMap<usize, TokenBlock> = BTreeMap::new();
        for f in frames {
            embedded.insert(f, emb.embed_clip(&[video.frame_block(f)])?);
        }
        let mut data = ndarray::Array2::zeros((self.m, self.d));
        let mut prov = Vec::with_capacity(self.m);
        for (row, &i) in chosen.iter().enumerate() {
            let (f, c) = (i / s, i % s);
            let block = &embedded[&f];
            data.row_mut(row).assign(&block.data.row(c));
            prov.push(block.prov[c]);
        }
        let mut block = TokenBlock::new(video.video_id.clone(), data, prov);
        emb.apply_pe(&mut block)?;
        self.check_block(&video.video_id, &block)?;
        self.slots.insert(video.video_id.clone(), block);
        self.write_epoch.insert(video.video_id.clone(), 0);
        Ok(())
    }

    /// Copy-on-read snapshot of a slot.
    pub fn read(&self, video_id: &str) -> Result<TokenBlock> {
        self.slots
            .get(video_id)
            .cloned()
            .ok_or_else(|| Error::UnknownVideo(video_id.to_string()))
    }

    /// Replace a slot (single-owner path: population and snapshot restore).
    pub fn write(&mut self, video_id: &str, block: TokenBlock) -> Result<()> {
        self.check_block(video_id, &block)?;
        if !self.slots.contains_key(video_id) {
            return Err(Error::UnknownVideo(video_id.to_string()));
        }
        self.slots.insert(video_id.to_string(), block);
        *self.write_epoch.get_mut(video_id).unwrap() += 1;
        Ok(())
    }

    pub fn write_epoch(&self, video_id: &str) -> u64 {
        self.write_epoch.get(video_id).copied().unwrap_or(0)
    }

    /// Re-initialize every slot from an epoch-derived seed and zero the
    /// write counters.
    pub fn reset_all(
        &mut self,
        videos: &[&SyntheticVideo],
        emb: &FrozenEmbedder,
        epoch_seed: u64,
    ) -> Result<()> {
        for v in videos {
            self.init_random(v, emb, epoch_seed)?;
        }
        Ok(())
    }

    /// Open a training iteration with `r` simulated workers.
    pub fn begin_iteration(&mut self, r: usize) -> IterationSession<'_> {
        self.iteration += 1;
        let iteration = self.iteration;
        IterationSession {
            bank: self,
            iteration,
            shadows: vec![BTreeMap::new(); r],
            writers: BTreeMap::new(),
            finished: vec![false; r],
        }
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }
}

/// One simulated multi-worker iteration over the shared bank.
pub struct IterationSession<'b> {
    bank: &'b mut MemoryBank,
    iteration: u64,
    shadows: Vec<BTreeMap<String, TokenBlock>>,
    writers: BTreeMap<String, usize>,
    finished: Vec<bool>,
}

impl IterationSession<'_> {
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Reads see the shared state at iteration start (writes are shadowed).
    pub fn read(&self, video_id: &str) -> Result<TokenBlock> {
        self.bank.read(video_id)
    }

    /// Shadow-write a slot on behalf of a worker. A second write to the
    /// same slot within this iteration, from any worker, is the race the
    /// scheduler exists to prevent.
    pub fn write(&mut self, worker: usize, video_id: &str, block: TokenBlock) -> Result<()> {
        self.bank.check_block(video_id, &block)?;
        if !self.bank.slots.contains_key(video_id) {
            return Err(Error::UnknownVideo(video_id.to_string()));
        }
        if self.writers.contains_key(video_id) {
            return Err(Error::RaceCondition {
                video_id: video_id.to_string(),
                iteration: self.iteration,
            });
        }
        self.writers.insert(video_id.to_string(), worker);
        self.shadows[worker].insert(video_id.to_string(), block);
        Ok(())
    }

    pub fn finish_worker(&mut self, worker: usize) {
        self.finished[worker] = true;
    }

    /// Reconcile all shadow writes into the shared bank. Errors if a worker
    /// has not reported completion.
    pub fn sync(self) -> Result<()> {
        let done = self.finished.iter().filter(|&&f| f).count();
        if done != self.finished.len() {
            return Err(Error::SyncIncomplete {
                done,
                total: self.finished.len(),
            });
        }
        for shadow in self.shadows {
            for (video_id, block) in shadow {
                self.bank.slots.insert(video_id.clone(), block);
                *self.bank.write_epoch.get_mut(&video_id).unwrap() += 1;
            }
        }
        Ok(())
    }
}

/// Per-worker query batches for one iteration. Across all workers no two
/// queries share a video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IterationPlan {
    pub workers: Vec<Vec<usize>>,
}

impl IterationPlan {
    pub fn all_queries(&self) -> impl Iterator<Item = usize> + '_ {
        self.workers.iter().flatten().copied()
    }

    pub fn len(&self) -> usize {
        self.workers.iter().map(|w| w.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Schedule every query exactly once into race-free iterations.
///
/// Per-worker batches never exceed `min(batch_size, ceil(n / r))` for `n`
/// distinct videos; when `batch_size * r` exceeds the distinct-video count
/// the plan shrinks batches rather than violate the constraint.
pub fn plan_iterations(
    video_ids: &[&str],
    batch_size: usize,
    r: usize,
    seed: u64,
) -> Vec<IterationPlan> {
    let n_videos = video_ids.iter().collect::<BTreeSet<_>>().len();
    let per_worker = batch_size.min(n_videos.div_ceil(r)).max(1);
    let cap = per_worker * r;

    let mut order: Vec<usize> = (0..video_ids.len()).collect();
    let mut rng = seeds::rng(seed, seeds::STREAM_PLAN, 0);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }

    let mut remaining: std::collections::VecDeque<usize> = order.into();
    let mut plans = Vec::new();
    while !remaining.is_empty() {
        let mut seen = BTreeSet::new();
        let mut picked = Vec::new();
        let mut deferred = std::collections::VecDeque::new();
        while let Some(q) = remaining.pop_front() {
            if picked.len() == cap {
                deferred.push_back(q);
                continue;
            }
            let vid = video_ids[q];
            if seen.insert(vid) {
                picked.push(q);
            } else {
                deferred.push_back(q);
            }
        }
        remaining = deferred;
        let mut workers = vec![Vec::new(); r];
        for (i, q) in picked.into_iter().enumerate() {
            workers[i % r].push(q);
        }
        plans.push(IterationPlan { workers });
    }
    plans
}

// ---------------------------------------------------------------------------
// Memory snapshot file: magic "VMMB" | version u32 | m u32 | d u32 |
// video_count u32, then per video: id (u16 + utf8) | write_epoch u64 |
// m rows of (frame u32 | cell u32 | time f64 | d x f64).
// ---------------------------------------------------------------------------

const MB_MAGIC: [u8; 4] = *b"VMMB";
const MB_VERSION: u32 = 1;

pub fn write_snapshot(bank: &MemoryBank, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&MB_MAGIC)?;
    w.write_all(&MB_VERSION.to_le_bytes())?;
    w.write_all(&(bank.m as u32).to_le_bytes())?;
    w.write_all(&(bank.d as u32).to_le_bytes())?;
    w.write_all(&(bank.slots.len() as u32).to_le_bytes())?;
    for (id, block) in &bank.slots {
        w.write_all(&(id.len() as u16).to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        w.write_all(&bank.write_epoch(id).to_le_bytes())?;
        for i in 0..block.len() {
            let p = block.prov[i];
            w.write_all(&p.frame_index.to_le_bytes())?;
            w.write_all(&p.spatial_cell.to_le_bytes())?;
            w.write_all(&p.video_time.to_le_bytes())?;
            for v in block.data.row(i) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<MemoryBank> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut take = |n: usize, section: &'static str| -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf).map_err(|_| Error::Truncated {
            section,
            needed: n,
        })?;
        Ok(buf)
    };
    let magic: [u8; 4] = take(4, "magic")?.try_into().unwrap();
    if magic != MB_MAGIC {
        return Err(Error::BadMagic {
            expected: MB_MAGIC,
            found: magic,
        });
    }
    let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
    if version != MB_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: MB_VERSION,
        });
    }
    let m = u32::from_le_bytes(take(4, "m")?.try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(take(4, "d")?.try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(take(4, "count")?.try_into().unwrap()) as usize;
    let mut slots = BTreeMap::new();
    let mut write_epoch = BTreeMap::new();
    for _ in 0..count {
        let id_len = u16::from_le_bytes(take(2, "id len")?.try_into().unwrap()) as usize;
        let id = String::from_utf8_lossy(&take(id_len, "id")?).into_owned();
        let epoch = u64::from_le_bytes(take(8, "epoch")?.try_into().unwrap());
        let mut data = ndarray::Array2::zeros((m, d));
        let mut prov = Vec::with_capacity(m);
        for row in 0..m {
            let frame = u32::from_le_bytes(take(4, "frame")?.try_into().unwrap());
            let cell = u32::from_le_bytes(take(4, "cell")?.try_into().unwrap());
            let time = f64::from_le_bytes(take(8, "time")?.try_into().unwrap());
            prov.push(TokenProv {
                frame_index: frame,
                spatial_cell: cell,
                video_time: time,
            });
            let payload = take(d * 8, "tokens")?;
            for (j, c) in payload.chunks_exact(8).enumerate() {
                data[(row, j)] = f64::from_le_bytes(c.try_into().unwrap());
            }
        }
        let mut block = TokenBlock::new(id.clone(), data, prov);
        block.pe_applied = vec![true; m];
        slots.insert(id.clone(), block);
        write_epoch.insert(id, epoch);
    }
    Ok(MemoryBank {
        m,
        d,
        slots,
        write_epoch,
        iteration: 0,
    })
}
