//! Hidden-state initialization between consecutive batches and the stream
//! batcher that makes carried states meaningful.
//!
//! In contiguous mode the corpus is cut into `B` equal segments, one per batch
//! slot, and each slot advances through its segment `T` tokens at a time, so
//! position 0 of batch `n + 1` directly follows position `T - 1` of batch `n`.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ForwardOutput, LanguageModel};
use crate::ndcore::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CarryKind {
    #[default]
    Zero,
    Previous,
}

impl CarryKind {
    pub fn name(self) -> &'static str {
        match self {
            CarryKind::Zero => "zero",
            CarryKind::Previous => "previous",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CarryPolicy {
    pub kind: CarryKind,
    /// Stop gradients at the batch boundary (truncated BPTT).
    pub detach: bool,
}

impl Default for CarryPolicy {
    fn default() -> Self {
        Self {
            kind: CarryKind::Zero,
            detach: true,
        }
    }
}

impl CarryPolicy {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn previous() -> Self {
        Self {
            kind: CarryKind::Previous,
            detach: true,
        }
    }
}

/// Last-step states of the previous batch, `[B, state_size]` per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CarryState {
    pub stream_ids: Vec<usize>,
    pub layers: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetReason {
    NonFinite,
    EpochBoundary,
}

/// A stream slot whose carry was zeroed at capture time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarryReset {
    pub stream: usize,
    pub reason: ResetReason,
}

/// Initial states for the next batch.
pub fn init_hidden(
    policy: &CarryPolicy,
    carry: Option<&CarryState>,
    stream_ids: &[usize],
    layers: usize,
    state_size: usize,
) -> Result<Vec<Tensor>> {
    let zeros = || (0..layers).map(|_| Tensor::zeros(&[stream_ids.len(), state_size])).collect();
    match (policy.kind, carry) {
        (CarryKind::Zero, _) | (CarryKind::Previous, None) => Ok(zeros()),
        (CarryKind::Previous, Some(c)) => {
            if c.stream_ids != stream_ids {
                return Err(Error::StreamMismatch {
                    expected: c.stream_ids.clone(),
                    found: stream_ids.to_vec(),
                });
            }
            let expect = [stream_ids.len(), state_size];
            if c.layers.len() != layers || c.layers.iter().any(|t| t.shape() != expect) {
                let found = c.layers.first().map(|t| t.shape().to_vec()).unwrap_or_default();
                return Err(Error::shape("init_hidden", &found, &expect));
            }
            Ok(c.layers.clone())
        }
    }
}

/// Snapshot of `final_states`; slots that are non-finite or sit on an epoch
/// boundary are zeroed and reported.
pub fn capture_carry(final_states: &[Tensor], stream_ids: &[usize], epoch_boundary: &[bool]) -> (CarryState, Vec<CarryReset>) {
    let mut layers: Vec<Tensor> = final_states.to_vec();
    let mut resets = Vec::new();
    for (slot, &stream) in stream_ids.iter().enumerate() {
        let finite = layers.iter().all(|t| {
            let n = t.last_dim();
            t.data()[slot * n..(slot + 1) * n].iter().all(|v| v.is_finite())
        });
        let reason = if !finite {
            Some(ResetReason::NonFinite)
        } else if epoch_boundary.get(slot).copied().unwrap_or(false) {
            Some(ResetReason::EpochBoundary)
        } else {
            None
        };
        if let Some(reason) = reason {
            for t in layers.iter_mut() {
                let n = t.last_dim();
                t.data_mut()[slot * n..(slot + 1) * n].fill(0.0);
            }
            if reason == ResetReason::NonFinite {
                warn!("carry for stream {stream} was non-finite; reset to zeros");
            }
            resets.push(CarryReset { stream, reason });
        }
    }
    (
        CarryState {
            stream_ids: stream_ids.to_vec(),
            layers,
        },
        resets,
    )
}

/// Runs consecutive `chunks` (each `B × T_i`, row-major) on one tape, threading
/// final states into the next chunk. With `detach`, each boundary is a constant.
pub fn forward_chained(
    model: &LanguageModel,
    tape: &mut Tape,
    vars: &[Var],
    chunks: &[Vec<usize>],
    batch: usize,
    h0: Vec<Var>,
    detach: bool,
) -> Result<Vec<ForwardOutput>> {
    let mut h = h0;
    let mut outs = Vec::with_capacity(chunks.len());
    for chunk in chunks {
        let out = model.forward(tape, vars, chunk, batch, &h)?;
        h = if detach {
            out.final_states.iter().map(|&v| tape.detach(v)).collect()
        } else {
            out.final_states.clone()
        };
        outs.push(out);
    }
    Ok(outs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    #[default]
    Contiguous,
    Shuffled,
}

/// One training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `B × T`, row-major.
    pub inputs: Vec<usize>,
    /// `inputs` shifted by one within each stream.
    pub targets: Vec<usize>,
    pub stream_ids: Vec<usize>,
    /// Set when the next batch in this slot does not continue this one.
    pub epoch_boundary: Vec<bool>,
    pub batch: usize,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct StreamBatcher {
    tokens: Vec<u8>,
    batch: usize,
    steps: usize,
    mode: BatchMode,
    seg_len: usize,
    cursor: usize,
    order: Vec<usize>,
    order_pos: usize,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl StreamBatcher {
    pub fn new(tokens: Vec<u8>, batch: usize, steps: usize, mode: BatchMode, seed: u64) -> Result<Self> {
        if batch == 0 || steps == 0 {
            return Err(Error::invalid("batch size and sequence length must be positive"));
        }
        let needed = batch * (steps + 1);
        if tokens.len() < needed {
            return Err(Error::DataTooShort {
                needed,
                available: tokens.len(),
            });
        }
        let mut b = Self {
            seg_len: tokens.len() / batch,
            tokens,
            batch,
            steps,
            mode,
            cursor: 0,
            order: Vec::new(),
            order_pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            epoch: 0,
        };
        if mode == BatchMode::Shuffled {
            if b.num_chunks() < batch {
                return Err(Error::DataTooShort {
                    needed,
                    available: b.tokens.len(),
                });
            }
            b.reshuffle();
        }
        Ok(b)
    }

    pub fn mode(&self) -> BatchMode {
        self.mode
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.steps
    }

    /// Number of `T + 1` token chunks starting at multiples of `T`.
    pub fn num_chunks(&self) -> usize {
        (self.tokens.len() - 1) / self.steps
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.num_chunks()).collect();
        self.order.shuffle(&mut self.rng);
        self.order_pos = 0;
    }

    pub fn next_batch(&mut self) -> Batch {
        let (b, t) = (self.batch, self.steps);
        let mut inputs = Vec::with_capacity(b * t);
        let mut targets = Vec::with_capacity(b * t);
        let boundary = match self.mode {
            BatchMode::Contiguous => {
                for s in 0..b {
                    let start = s * self.seg_len + self.cursor;
                    inputs.extend(self.tokens[start..start + t].iter().map(|&x| x as usize));
                    targets.extend(self.tokens[start + 1..start + t + 1].iter().map(|&x| x as usize));
                }
                self.cursor += t;
                let wrap = self.cursor + t + 1 > self.seg_len;
                if wrap {
                    self.cursor = 0;
                }
                wrap
            }
            BatchMode::Shuffled => {
                for &chunk in &self.order[self.order_pos..self.order_pos + b] {
                    let start = chunk * t;
                    inputs.extend(self.tokens[start..start + t].iter().map(|&x| x as usize));
                    targets.extend(self.tokens[start + 1..start + t + 1].iter().map(|&x| x as usize));
                }
                self.order_pos += b;
                let wrap = self.order_pos + b > self.order.len();
                if wrap {
                    self.reshuffle();
                }
                wrap
            }
        };
        if boundary {
            self.epoch += 1;
            info!("batcher epoch {} begins", self.epoch);
        }
        Batch {
            inputs,
            targets,
            stream_ids: (0..b).collect(),
            epoch_boundary: vec![boundary; b],
            batch: b,
            steps: t,
        }
    }
}
