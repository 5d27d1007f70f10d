//! Autoregressive training with Adam, global-norm clipping, carried hidden
//! states and overflow guarding.
//!
//! Metrics are JSON lines. Every step writes
//! `{"type":"step","step","loss","lr","grad_norm","overflow_flag","spike_flag","max_abs_h"}`;
//! validation writes `{"type":"eval","step","val_nll"}`; anything unusual writes
//! `{"type":"event","step","kind",...}`.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::carry::{capture_carry, init_hidden, Batch, BatchMode, CarryKind, CarryPolicy, CarryState, StreamBatcher};
use crate::error::{Error, Result};
use crate::evaluator::{perplexity_by_length, EvalOptions, ModelScorer};
use crate::models::{save_checkpoint, LanguageModel, MixerKind};
use crate::ndcore::{Precision, Tape, Tensor, Var};
use crate::provenance::Provenance;
use crate::stability::OverflowMonitor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seq_len: usize,
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
    pub carry: CarryPolicy,
    pub batch_mode: BatchMode,
    pub precision: Precision,
    /// Validation cadence in steps; 0 disables.
    pub eval_every: usize,
    pub eval_tokens: usize,
    /// Checkpoint cadence in steps; 0 saves only at the end.
    pub checkpoint_every: usize,
    /// Loss above `spike_factor ×` the trailing median flags a spike.
    pub spike_factor: f64,
    pub spike_window: usize,
    /// Abort after this many consecutive skipped steps.
    pub max_consecutive_skips: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seq_len: 32,
            batch: 16,
            steps: 1000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
            seed: 0,
            carry: CarryPolicy::default(),
            batch_mode: BatchMode::Contiguous,
            precision: Precision::F64,
            eval_every: 0,
            eval_tokens: 16384,
            checkpoint_every: 0,
            spike_factor: 3.0,
            spike_window: 100,
            max_consecutive_skips: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: format!("train.{key}"),
                msg: msg.into(),
            })
        };
        if self.seq_len < 2 {
            return bad("seq_len", "must be at least 2");
        }
        if self.batch == 0 {
            return bad("batch", "must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "Adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || self.clip_norm < 0.0 || self.weight_decay < 0.0 {
            return bad("eps", "eps must be positive; clip_norm and weight_decay non-negative");
        }
        if !self.carry.detach {
            return bad(
                "carry.detach",
                "training requires detach = true; undetached carry is only available through carry::forward_chained",
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
            clip_norm: c.clip_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamOutcome {
    /// Norm before clipping.
    pub grad_norm: f64,
    pub skipped: bool,
}

/// Global-norm L2 of all gradients, summed in parameter order.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// One Adam update with bias correction, after clipping the global norm to
/// `clip_norm`. Non-finite gradients leave parameters and moments untouched.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<AdamOutcome> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("adam_step", &[params.len()], &[grads.len(), state.m.len()]));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Ok(AdamOutcome {
            grad_norm: norm,
            skipped: true,
        });
    }
    let scale = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
        cfg.clip_norm / norm
    } else {
        1.0
    };
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gi = gi * scale;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            *w -= cfg.lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * *w);
        }
    }
    Ok(AdamOutcome {
        grad_norm: norm,
        skipped: false,
    })
}

/// JSON-lines metrics, kept in memory and optionally mirrored to a file.
#[derive(Debug, Default)]
pub struct MetricsLog {
    pub records: Vec<Value>,
    file: Option<BufWriter<File>>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        Ok(Self {
            records: Vec::new(),
            file: Some(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn push(&mut self, v: Value) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            serde_json::to_writer(&mut *f, &v)?;
            f.write_all(b"\n")?;
        }
        self.records.push(v);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(f) = self.file.as_mut() {
            f.flush()?;
        }
        Ok(())
    }

    pub fn events(&self) -> impl Iterator<Item = &Value> {
        self.records.iter().filter(|r| r["type"] == "event")
    }

    pub fn steps(&self) -> impl Iterator<Item = &Value> {
        self.records.iter().filter(|r| r["type"] == "step")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub overflow: bool,
    pub skipped: bool,
    pub spike: bool,
    /// Per layer, `[B, state_size]` after the batch (before any reset).
    pub final_states: Vec<Tensor>,
}

/// Training state; [`Trainer::step`] advances by one batch.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: LanguageModel,
    pub adam: AdamState,
    pub batcher: StreamBatcher,
    pub carry: Option<CarryState>,
    monitor: OverflowMonitor,
    recent: VecDeque<f64>,
    step: usize,
    consecutive_skips: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: LanguageModel, tokens: Vec<u8>, log: &mut MetricsLog) -> Result<Self> {
        cfg.validate()?;
        let batcher = StreamBatcher::new(tokens, cfg.batch, cfg.seq_len, cfg.batch_mode, cfg.seed)?;
        if cfg.carry.kind == CarryKind::Previous && cfg.batch_mode == BatchMode::Shuffled {
            let msg = "previous-state carry with a shuffled batcher: carried states come from unrelated text";
            warn!("CONFIGURATION WARNING: {msg}");
            log.push(json!({"type": "event", "step": 0, "kind": "config_warning", "message": msg}))?;
        }
        let adam = AdamState::new(model.params().tensors());
        Ok(Self {
            monitor: OverflowMonitor::new(cfg.precision),
            cfg,
            model,
            adam,
            batcher,
            carry: None,
            recent: VecDeque::new(),
            step: 0,
            consecutive_skips: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Next batch, initial states from the carry policy.
    pub fn step(&mut self, log: &mut MetricsLog) -> Result<StepReport> {
        let batch = self.batcher.next_batch();
        let layers = self.model.config().layers;
        let h0 = init_hidden(&self.cfg.carry, self.carry.as_ref(), &batch.stream_ids, layers, self.model.config().state_size())?;
        self.step_on(&batch, h0, log)
    }

    /// One update on `batch` from explicit initial states.
    pub fn step_on(&mut self, batch: &Batch, h0: Vec<Tensor>, log: &mut MetricsLog) -> Result<StepReport> {
        let step = self.step;
        self.step += 1;
        let precision = self.cfg.precision;
        let lambda_max = self.lambda_max();
        let mut tape = Tape::new(precision);
        let vars = self.model.params().bind(&mut tape);
        let hv: Vec<Var> = h0.into_iter().map(|t| tape.constant(t)).collect();
        let forward = self
            .model
            .forward(&mut tape, &vars, &batch.inputs, batch.batch, &hv)
            .and_then(|out| {
                let loss = tape.cross_entropy(out.logits, &batch.targets)?;
                Ok((out, loss))
            });
        let (out, loss_var) = match forward {
            Ok(v) => v,
            Err(Error::Overflow { layer, step: t, detail }) => {
                let layer_max: Vec<f64> = vec![f64::NAN; self.model.config().layers];
                for ev in self.monitor.observe(step, &layer_max, &lambda_max) {
                    if Some(ev.layer) == layer || layer.is_none() {
                        log.push(json!({"type": "event", "step": step, "kind": "monitor", "event": ev}))?;
                    }
                }
                log.push(json!({
                    "type": "event", "step": step, "kind": "overflow",
                    "layer": layer, "position": t, "detail": detail,
                }))?;
                self.carry = None;
                log.push(json!({"type": "event", "step": step, "kind": "carry_reset", "reason": "overflow"}))?;
                return self.skip(step, f64::NAN, f64::NAN, true, Vec::new(), log);
            }
            Err(e) => return Err(e),
        };
        let loss = tape.value(loss_var).item()?;
        let layer_max: Vec<f64> = out.states.iter().map(|&s| tape.value(s).max_abs()).collect();
        let finals: Vec<Tensor> = out.final_states.iter().map(|&v| tape.value(v).clone()).collect();
        for ev in self.monitor.observe(step, &layer_max, &lambda_max) {
            log.push(json!({"type": "event", "step": step, "kind": "monitor", "event": ev}))?;
        }
        if !loss.is_finite() {
            self.carry = None;
            log.push(json!({"type": "event", "step": step, "kind": "overflow", "detail": "non-finite loss"}))?;
            return self.skip(step, loss, f64::NAN, true, finals, log);
        }
        if self.cfg.carry.kind == CarryKind::Previous {
            let (carry, resets) = capture_carry(&finals, &batch.stream_ids, &batch.epoch_boundary);
            for r in resets {
                log.push(json!({"type": "event", "step": step, "kind": "carry_reset", "stream": r.stream, "reason": r.reason}))?;
            }
            self.carry = Some(carry);
        }
        let grads = tape.backward(loss_var)?;
        let grads: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
        let outcome = adam_step(self.model.params_mut().tensors_mut(), &grads, &mut self.adam, &(&self.cfg).into())?;
        if outcome.skipped {
            log.push(json!({"type": "event", "step": step, "kind": "nonfinite_grad", "grad_norm": outcome.grad_norm}))?;
            return self.skip(step, loss, outcome.grad_norm, false, finals, log);
        }
        if precision == Precision::F32 {
            for t in self.model.params_mut().tensors_mut() {
                precision.round_slice(t.data_mut());
            }
        }
        self.consecutive_skips = 0;
        let spike = self.spike_check(step, loss, log)?;
        log.push(json!({
            "type": "step", "step": step, "loss": loss, "lr": self.cfg.lr,
            "grad_norm": outcome.grad_norm, "overflow_flag": false, "spike_flag": spike,
            "max_abs_h": layer_max,
        }))?;
        Ok(StepReport {
            step,
            loss,
            grad_norm: outcome.grad_norm,
            overflow: false,
            skipped: false,
            spike,
            final_states: finals,
        })
    }

    fn skip(&mut self, step: usize, loss: f64, grad_norm: f64, overflow: bool, finals: Vec<Tensor>, log: &mut MetricsLog) -> Result<StepReport> {
        self.consecutive_skips += 1;
        log.push(json!({
            "type": "step", "step": step, "loss": loss, "lr": self.cfg.lr, "grad_norm": grad_norm,
            "overflow_flag": overflow, "spike_flag": false, "skipped": true,
        }))?;
        if self.consecutive_skips > self.cfg.max_consecutive_skips {
            log.flush()?;
            return Err(Error::Overflow {
                layer: None,
                step,
                detail: format!("{} consecutive steps skipped", self.consecutive_skips),
            });
        }
        Ok(StepReport {
            step,
            loss,
            grad_norm,
            overflow,
            skipped: true,
            spike: false,
            final_states: finals,
        })
    }

    fn spike_check(&mut self, step: usize, loss: f64, log: &mut MetricsLog) -> Result<bool> {
        let mut spike = false;
        if self.recent.len() >= 10.min(self.cfg.spike_window) && self.cfg.spike_window > 0 {
            let mut sorted: Vec<f64> = self.recent.iter().copied().collect();
            sorted.sort_by(f64::total_cmp);
            let median = sorted[sorted.len() / 2];
            if loss > self.cfg.spike_factor * median {
                spike = true;
                log.push(json!({"type": "event", "step": step, "kind": "spike", "loss": loss, "median": median}))?;
            }
        }
        self.recent.push_back(loss);
        while self.recent.len() > self.cfg.spike_window {
            self.recent.pop_front();
        }
        Ok(spike)
    }

    fn lambda_max(&self) -> Vec<f64> {
        let per_layer = self.model.max_decay_per_layer();
        if self.model.config().mixer == MixerKind::Ssm {
            per_layer
        } else {
            vec![f64::NAN; self.model.config().layers]
        }
    }

    /// Mean NLL over zero-started windows of `seq_len` tokens.
    pub fn validate(&self, tokens: &[u8]) -> Result<f64> {
        let scorer = ModelScorer {
            model: &self.model,
            precision: self.cfg.precision,
        };
        let opts = EvalOptions {
            max_tokens: Some(self.cfg.eval_tokens),
            ..EvalOptions::default()
        };
        Ok(perplexity_by_length(&scorer, tokens, &[self.cfg.seq_len], &opts)?.nll[0])
    }
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub provenance: Provenance,
    /// Extra fields merged into the checkpoint metadata.
    pub meta: Value,
}

impl RunOutput {
    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: LanguageModel,
    pub final_loss: f64,
    pub steps_run: usize,
}

/// Full training run. Metrics go to `log`; with `out`, checkpoints are saved
/// at the configured cadence and at the end.
pub fn train_run(
    cfg: &TrainConfig,
    model: LanguageModel,
    train_tokens: Vec<u8>,
    valid_tokens: Option<&[u8]>,
    out: Option<&RunOutput>,
    log: &mut MetricsLog,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg.clone(), model, train_tokens, log)?;
    let mut last = f64::NAN;
    for step in 0..cfg.steps {
        let r = trainer.step(log)?;
        if !r.skipped {
            last = r.loss;
        }
        let done = step + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 {
            if let Some(v) = valid_tokens {
                let nll = trainer.validate(v)?;
                info!("step {done}: loss {:.4} val_nll {nll:.4}", r.loss);
                log.push(json!({"type": "eval", "step": step, "val_nll": nll}))?;
            }
        }
        if let Some(o) = out {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
                save(&trainer, o, done)?;
            }
        }
    }
    if let Some(o) = out {
        save(&trainer, o, cfg.steps)?;
    }
    log.flush()?;
    Ok(TrainOutcome {
        model: trainer.model,
        final_loss: last,
        steps_run: cfg.steps,
    })
}

fn save(trainer: &Trainer, out: &RunOutput, step: usize) -> Result<()> {
    let mut meta = json!({"step": step, "provenance": out.provenance, "train": trainer.cfg});
    if let (Some(m), Some(extra)) = (meta.as_object_mut(), out.meta.as_object()) {
        for (k, v) in extra {
            m.insert(k.clone(), v.clone());
        }
    }
    save_checkpoint(&out.checkpoint_path(), &trainer.model, &meta, Precision::F64)
}
