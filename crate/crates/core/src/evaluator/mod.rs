//! Perplexity as a function of evaluation length, and its classification into
//! strong, weak or no length extension.
//!
//! Every length `L` is scored on the same token region (a whole number of
//! `max(lengths)` windows), cut into consecutive windows of `L` tokens. Windows
//! are dealt into `B` streams and run in chunks of at most `chunk` steps; state
//! always flows exactly between chunks of one window. Between windows of a
//! stream the state is zeroed, or carried over when `carry` is set.

pub mod entropy;
mod report;

pub use report::{render_svg, write_report_csv, write_report_json};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::carry::BatchMode;
use crate::error::{Error, Result};
use crate::models::{LanguageModel, VOCAB};
use crate::ndcore::{Precision, Tape, Tensor, Var};

/// Anything that assigns per-position NLLs to batched token chunks while
/// threading a recurrent state.
pub trait Scorer {
    type State: Clone;

    fn initial_state(&self, batch: usize) -> Self::State;

    /// State of the first `rows` streams.
    fn take_rows(&self, state: &Self::State, rows: usize) -> Self::State;

    /// NLL (nats) of each target, `B × T` row-major, and the state after the chunk.
    fn score_chunk(&self, inputs: &[usize], targets: &[usize], batch: usize, state: &Self::State) -> Result<(Vec<f64>, Self::State)>;
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Per-position NLLs from `[B, T, V]` logits.
pub fn token_nll(logits: &Tensor, targets: &[usize]) -> Result<Vec<f64>> {
    let v = logits.last_dim();
    if logits.numel() != targets.len() * v {
        return Err(Error::shape("token_nll", logits.shape(), &[targets.len()]));
    }
    targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            if t >= v {
                return Err(Error::invalid(format!("target {t} out of range for {v} classes")));
            }
            let row = &logits.data()[r * v..(r + 1) * v];
            Ok(log_sum_exp(row) - row[t])
        })
        .collect()
}

/// A language model scored on a tape of the given precision.
pub struct ModelScorer<'a> {
    pub model: &'a LanguageModel,
    pub precision: Precision,
}

impl Scorer for ModelScorer<'_> {
    type State = Vec<Tensor>;

    fn initial_state(&self, batch: usize) -> Vec<Tensor> {
        self.model.zero_states(batch)
    }

    fn take_rows(&self, state: &Vec<Tensor>, rows: usize) -> Vec<Tensor> {
        state
            .iter()
            .map(|t| {
                let n = t.last_dim();
                Tensor::new(vec![rows, n], t.data()[..rows * n].to_vec()).expect("row slice")
            })
            .collect()
    }

    fn score_chunk(&self, inputs: &[usize], targets: &[usize], batch: usize, state: &Vec<Tensor>) -> Result<(Vec<f64>, Vec<Tensor>)> {
        let mut tape = Tape::new(self.precision);
        let vars = self.model.params().bind_constant(&mut tape);
        let h: Vec<Var> = state.iter().map(|t| tape.constant(t.clone())).collect();
        let out = self.model.forward(&mut tape, &vars, inputs, batch, &h)?;
        let nll = token_nll(tape.value(out.logits), targets)?;
        let next = out.final_states.iter().map(|&v| tape.value(v).clone()).collect();
        Ok((nll, next))
    }
}

impl Scorer for LanguageModel {
    type State = Vec<Tensor>;

    fn initial_state(&self, batch: usize) -> Vec<Tensor> {
        self.zero_states(batch)
    }

    fn take_rows(&self, state: &Vec<Tensor>, rows: usize) -> Vec<Tensor> {
        ModelScorer {
            model: self,
            precision: Precision::F64,
        }
        .take_rows(state, rows)
    }

    fn score_chunk(&self, inputs: &[usize], targets: &[usize], batch: usize, state: &Vec<Tensor>) -> Result<(Vec<f64>, Vec<Tensor>)> {
        ModelScorer {
            model: self,
            precision: Precision::F64,
        }
        .score_chunk(inputs, targets, batch, state)
    }
}

/// Uniform prediction over all 256 bytes.
pub struct UniformScorer;

impl Scorer for UniformScorer {
    type State = ();

    fn initial_state(&self, _: usize) {}

    fn take_rows(&self, _: &(), _: usize) {}

    fn score_chunk(&self, _: &[usize], targets: &[usize], _: usize, _: &()) -> Result<(Vec<f64>, ())> {
        Ok((vec![(VOCAB as f64).ln(); targets.len()], ()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Positions {
    #[default]
    All,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub mode: BatchMode,
    /// Carry state across consecutive windows of a stream.
    pub carry: bool,
    pub positions: Positions,
    pub batch: usize,
    pub chunk: usize,
    /// Upper bound on scored tokens per length (rounded down to whole windows).
    pub max_tokens: Option<usize>,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: BatchMode::Contiguous,
            carry: false,
            positions: Positions::All,
            batch: 16,
            chunk: 256,
            max_tokens: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    Strong,
    Weak,
    None,
}

impl Classification {
    pub fn name(self) -> &'static str {
        match self {
            Classification::Strong => "strong",
            Classification::Weak => "weak",
            Classification::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthExtensionReport {
    pub lengths: Vec<usize>,
    pub perplexity: Vec<f64>,
    pub nll: Vec<f64>,
    /// Scored positions per length.
    pub tokens: Vec<usize>,
    pub mode: BatchMode,
    pub carry: bool,
    pub positions: Positions,
    pub classification: Option<Classification>,
    pub t0: Option<usize>,
    pub epsilon: Option<f64>,
}

impl LengthExtensionReport {
    pub fn ppl_at(&self, length: usize) -> Option<f64> {
        self.lengths.iter().position(|&l| l == length).map(|i| self.perplexity[i])
    }

    /// Fills in the classification fields.
    pub fn classify(&mut self, t0: usize, epsilon: f64) -> Result<Classification> {
        let c = classify_extension(self, t0, epsilon)?;
        self.classification = Some(c);
        self.t0 = Some(t0);
        self.epsilon = Some(epsilon);
        Ok(c)
    }
}

/// `16, 32, …` doubling from `start` up to and including `end`.
pub fn doubling_lengths(start: usize, end: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut l = start.max(1);
    while l <= end {
        out.push(l);
        l *= 2;
    }
    out
}

/// Scores `stream` at every length in `lengths`.
pub fn perplexity_by_length<S: Scorer>(scorer: &S, stream: &[u8], lengths: &[usize], opts: &EvalOptions) -> Result<LengthExtensionReport> {
    if lengths.is_empty() || lengths[0] == 0 || lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("lengths must be positive and strictly increasing"));
    }
    if opts.batch == 0 || opts.chunk == 0 {
        return Err(Error::invalid("eval batch and chunk must be positive"));
    }
    let lmax = *lengths.last().unwrap();
    let mut windows_max = stream.len().saturating_sub(1) / lmax;
    if let Some(cap) = opts.max_tokens {
        windows_max = windows_max.min(cap / lmax);
    }
    if windows_max == 0 {
        return Err(Error::DataTooShort {
            needed: lmax + 1,
            available: stream.len(),
        });
    }
    let region = windows_max * lmax;
    let mut report = LengthExtensionReport {
        lengths: lengths.to_vec(),
        perplexity: Vec::new(),
        nll: Vec::new(),
        tokens: Vec::new(),
        mode: opts.mode,
        carry: opts.carry,
        positions: opts.positions,
        classification: None,
        t0: None,
        epsilon: None,
    };
    for &len in lengths {
        let (sum, count) = score_length(scorer, stream, region, len, opts)?;
        let nll = sum / count as f64;
        report.nll.push(nll);
        report.perplexity.push(nll.exp());
        report.tokens.push(count);
    }
    Ok(report)
}

fn score_length<S: Scorer>(scorer: &S, stream: &[u8], region: usize, len: usize, opts: &EvalOptions) -> Result<(f64, usize)> {
    let count = region / len;
    let mut order: Vec<usize> = (0..count).collect();
    if opts.mode == BatchMode::Shuffled {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed ^ len as u64));
    }
    // Stream s holds order[offset_s .. offset_s + len_s]; earlier streams get the extra windows.
    let nstreams = opts.batch.min(count);
    let base = count / nstreams;
    let extra = count % nstreams;
    let stream_len = |s: usize| base + usize::from(s < extra);
    let offset = |s: usize| s * base + s.min(extra);
    let rounds = stream_len(0);
    let mut state = scorer.initial_state(nstreams);
    let mut total = 0.0;
    let mut scored = 0usize;
    for round in 0..rounds {
        let active = (0..nstreams).filter(|&s| stream_len(s) > round).count();
        state = if opts.carry && round > 0 {
            scorer.take_rows(&state, active)
        } else {
            scorer.initial_state(active)
        };
        let starts: Vec<usize> = (0..active).map(|s| order[offset(s) + round] * len).collect();
        let mut pos = 0;
        while pos < len {
            let steps = opts.chunk.min(len - pos);
            let mut inputs = Vec::with_capacity(active * steps);
            let mut targets = Vec::with_capacity(active * steps);
            for &st in &starts {
                let a = st + pos;
                inputs.extend(stream[a..a + steps].iter().map(|&b| b as usize));
                targets.extend(stream[a + 1..a + steps + 1].iter().map(|&b| b as usize));
            }
            let (nll, next) = scorer.score_chunk(&inputs, &targets, active, &state)?;
            state = next;
            let last_chunk = pos + steps == len;
            for s in 0..active {
                let row = &nll[s * steps..(s + 1) * steps];
                match opts.positions {
                    Positions::All => {
                        total += row.iter().sum::<f64>();
                        scored += steps;
                    }
                    Positions::Last if last_chunk => {
                        total += row[steps - 1];
                        scored += 1;
                    }
                    Positions::Last => {}
                }
            }
            pos += steps;
        }
    }
    Ok((total, scored))
}

/// Strong: every step beyond `t0` lowers perplexity by more than `epsilon`.
/// Weak: no step raises it by more than `epsilon`. Otherwise none.
pub fn classify_extension(report: &LengthExtensionReport, t0: usize, epsilon: f64) -> Result<Classification> {
    let ppl: Vec<f64> = report
        .lengths
        .iter()
        .zip(&report.perplexity)
        .filter(|(&l, _)| l >= t0)
        .map(|(_, &p)| p)
        .collect();
    classify_sequence(&ppl, epsilon)
}

/// Classification of a perplexity sequence already restricted to lengths `≥ T0`.
pub fn classify_sequence(ppl: &[f64], epsilon: f64) -> Result<Classification> {
    if ppl.len() < 2 {
        return Err(Error::invalid(format!(
            "classification needs at least 2 lengths at or beyond T0, got {}",
            ppl.len()
        )));
    }
    if epsilon < 0.0 {
        return Err(Error::invalid("epsilon must be non-negative"));
    }
    if ppl.windows(2).all(|w| w[1] < w[0] - epsilon) {
        Ok(Classification::Strong)
    } else if ppl.windows(2).all(|w| w[1] <= w[0] + epsilon) {
        Ok(Classification::Weak)
    } else {
        Ok(Classification::None)
    }
}

#[cfg(test)]
mod tests;
