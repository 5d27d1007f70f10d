//! Byte-level language models built from stacked recurrent blocks.
//!
//! Every model shares one skeleton: a 256-row byte embedding, `layers` pre-norm
//! blocks (`x + mixer(LN(x))`, then `x + MLP(LN(x))`), a final norm and a
//! projection to 256 logits. Only the temporal mixer differs:
//!
//! | mixer    | state per stream | recurrence                                   |
//! |----------|------------------|----------------------------------------------|
//! | `ssm`    | `m`              | `h' = λ ⊙ h + U x + b`, `y = C σ(h)`         |
//! | `gated`  | `m × d`          | `h' = W(x) ⊙ h + U(x)`, `y_j = Σ_i C_ij σ(h_ij)` |
//! | `rnn`    | `m`              | `h' = tanh(W h + U x + b)`, `y = C h`        |
//! | `gru`    | `m`              | standard GRU cell, `y = C h`                 |
//!
//! Parameters live in a [`ParamStore`] in a fixed order; [`LanguageModel::forward`]
//! consumes tape variables in that same order.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Tape, Tensor, Var};
use crate::ssm::{param_from_decay, Activation, ScanMethod};

pub const VOCAB: usize = 256;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    #[default]
    Ssm,
    Gated,
    Rnn,
    Gru,
}

impl MixerKind {
    pub fn name(self) -> &'static str {
        match self {
            MixerKind::Ssm => "ssm",
            MixerKind::Gated => "gated",
            MixerKind::Rnn => "rnn",
            MixerKind::Gru => "gru",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mixer: MixerKind,
    pub layers: usize,
    pub d_model: usize,
    pub state_dim: usize,
    pub mlp_ratio: usize,
    pub tie_embeddings: bool,
    pub activation: Activation,
    pub scan: ScanMethod,
    pub decay_min: f64,
    pub decay_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ModelConfig {
    /// 2 layers, `d_model = 128`, `m = 64`.
    pub fn tiny() -> Self {
        Self {
            mixer: MixerKind::Ssm,
            layers: 2,
            d_model: 128,
            state_dim: 64,
            mlp_ratio: 4,
            tie_embeddings: false,
            activation: Activation::Gelu,
            scan: ScanMethod::Parallel,
            decay_min: 0.9,
            decay_max: 0.999,
        }
    }

    /// 6 layers, `d_model = 256`, `m = 128`.
    pub fn small() -> Self {
        Self {
            layers: 6,
            d_model: 256,
            state_dim: 128,
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            other => Err(Error::invalid(format!("unknown model preset `{other}` (expected tiny or small)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.state_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::invalid("layers, d_model, state_dim and mlp_ratio must be positive"));
        }
        if !(0.0 < self.decay_min && self.decay_min <= self.decay_max && self.decay_max < 1.0) {
            return Err(Error::invalid(format!(
                "decay range [{}, {}] must lie inside (0, 1)",
                self.decay_min, self.decay_max
            )));
        }
        Ok(())
    }

    /// Flattened recurrent state size per stream for one layer.
    pub fn state_size(&self) -> usize {
        match self.mixer {
            MixerKind::Gated => self.state_dim * self.d_model,
            _ => self.state_dim,
        }
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, m, r) = (self.d_model, self.state_dim, self.mlp_ratio * self.d_model);
        let mut out = vec![("embed".to_string(), vec![VOCAB, d])];
        for l in 0..self.layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            out.push((p("ln1.gain"), vec![d]));
            out.push((p("ln1.bias"), vec![d]));
            match self.mixer {
                MixerKind::Ssm => {
                    out.push((p("ssm.log_neg_decay"), vec![m]));
                    out.push((p("ssm.U"), vec![m, d]));
                    out.push((p("ssm.b"), vec![m]));
                    out.push((p("ssm.C"), vec![d, m]));
                }
                MixerKind::Gated => {
                    out.push((p("gated.A"), vec![m, d]));
                    out.push((p("gated.G"), vec![d, d]));
                    out.push((p("gated.g"), vec![d]));
                    out.push((p("gated.B"), vec![m, d]));
                    out.push((p("gated.C"), vec![m, d]));
                }
                MixerKind::Rnn => {
                    out.push((p("rnn.W"), vec![m, m]));
                    out.push((p("rnn.U"), vec![m, d]));
                    out.push((p("rnn.b"), vec![m]));
                    out.push((p("rnn.C"), vec![d, m]));
                }
                MixerKind::Gru => {
                    out.push((p("gru.Wx"), vec![3 * m, d]));
                    out.push((p("gru.bx"), vec![3 * m]));
                    out.push((p("gru.Wh"), vec![3 * m, m]));
                    out.push((p("gru.bh"), vec![3 * m]));
                    out.push((p("gru.C"), vec![d, m]));
                }
            }
            out.push((p("ln2.gain"), vec![d]));
            out.push((p("ln2.bias"), vec![d]));
            out.push((p("mlp.W1"), vec![r, d]));
            out.push((p("mlp.b1"), vec![r]));
            out.push((p("mlp.W2"), vec![d, r]));
            out.push((p("mlp.b2"), vec![d]));
        }
        out.push(("ln_f.gain".to_string(), vec![d]));
        out.push(("ln_f.bias".to_string(), vec![d]));
        if !self.tie_embeddings {
            out.push(("head.W".to_string(), vec![VOCAB, d]));
        }
        out.push(("head.b".to_string(), vec![VOCAB]));
        out
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Named tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new(names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::invalid("parameter names and tensors differ in length"));
        }
        Ok(Self { names, tensors })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Pushes every tensor onto `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Pushes every tensor onto `tape` as a constant (inference).
    pub fn bind_constant(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }
}

/// Output of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, T, 256]`
    pub logits: Var,
    /// Per layer, `[B, state_size]` after the last step.
    pub final_states: Vec<Var>,
    /// Per layer, `[B, T, state_size]`.
    pub states: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    config: ModelConfig,
    params: ParamStore,
}

struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }
}

impl LanguageModel {
    /// Fresh model with deterministic initialization from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, m, r) = (config.d_model, config.state_dim, config.mlp_ratio * config.d_model);
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.layout() {
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            let t = match (name.as_str(), leaf) {
                ("embed", _) => Tensor::randn(&shape, 1.0, &mut rng),
                (_, "gain") => Tensor::ones(&shape),
                (_, "bias") | (_, "b") | (_, "b1") | (_, "b2") | (_, "bx") | (_, "bh") | (_, "g") => {
                    Tensor::zeros(&shape)
                }
                (_, "log_neg_decay") => {
                    let (lo, hi) = (config.decay_min.ln(), config.decay_max.ln());
                    let data = (0..m)
                        .map(|_| param_from_decay(rand::Rng::gen_range(&mut rng, lo..=hi).exp()))
                        .collect();
                    Tensor::new(shape.clone(), data)?
                }
                (_, "A") => Tensor::full(&shape, 3.0),
                (_, "U") | (_, "B") | (_, "G") | (_, "Wx") | (_, "W1") => Tensor::randn(&shape, inv(d), &mut rng),
                (_, "C") => Tensor::randn(&shape, inv(m), &mut rng),
                (_, "W") if name.starts_with("blocks") => Tensor::randn(&shape, 0.5 * inv(m), &mut rng),
                (_, "Wh") => Tensor::randn(&shape, inv(m), &mut rng),
                (_, "W2") => Tensor::randn(&shape, 0.5 * inv(r), &mut rng),
                ("head.W", _) => Tensor::randn(&shape, inv(d), &mut rng),
                _ => return Err(Error::invalid(format!("no initializer for parameter `{name}`"))),
            };
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            config,
            params: ParamStore { names, tensors },
        })
    }

    /// Wraps existing parameters after checking them against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), (pn, t)) in layout.iter().zip(params.iter()) {
            if name != pn || shape.as_slice() != t.shape() {
                return Err(Error::invalid(format!(
                    "parameter `{pn}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Zero initial states, one `[B, state_size]` tensor per layer.
    pub fn zero_states(&self, batch: usize) -> Vec<Tensor> {
        (0..self.config.layers)
            .map(|_| Tensor::zeros(&[batch, self.config.state_size()]))
            .collect()
    }

    /// Largest decay of each diagonal SSM layer (empty for other mixers).
    pub fn max_decay_per_layer(&self) -> Vec<f64> {
        if self.config.mixer != MixerKind::Ssm {
            return Vec::new();
        }
        (0..self.config.layers)
            .map(|l| {
                self.params
                    .get(&format!("blocks.{l}.ssm.log_neg_decay"))
                    .map(|t| t.data().iter().map(|&v| crate::ssm::decay_from_param(v)).fold(0.0, f64::max))
                    .unwrap_or(0.0)
            })
            .collect()
    }

    /// Runs the model on `inputs` (`B × T`, row-major) from initial states `h0`.
    ///
    /// `vars` must come from [`ParamStore::bind`] or [`ParamStore::bind_constant`].
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], inputs: &[usize], batch: usize, h0: &[Var]) -> Result<ForwardOutput> {
        if vars.is_empty() {
            return Err(Error::invalid("forward got no parameter vars"));
        }
        if batch == 0 || inputs.is_empty() || !inputs.len().is_multiple_of(batch) {
            return Err(Error::shape("forward (inputs)", &[inputs.len()], &[batch]));
        }
        let embedded = tape.embedding(vars[0], inputs, &[batch, inputs.len() / batch])?;
        self.forward_embedded(tape, vars, embedded, h0)
    }

    /// As [`forward`](Self::forward), starting from embedded inputs `x` (`[B, T, d_model]`).
    pub fn forward_embedded(&self, tape: &mut Tape, vars: &[Var], x: Var, h0: &[Var]) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if vars.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "forward got {} parameter vars, model has {}",
                vars.len(),
                self.params.len()
            )));
        }
        let xs = tape.shape(x).to_vec();
        if xs.len() != 3 || xs[2] != cfg.d_model || xs[1] == 0 {
            return Err(Error::shape("forward (embedded inputs)", &xs, &[cfg.d_model]));
        }
        let (batch, steps) = (xs[0], xs[1]);
        if h0.len() != cfg.layers {
            return Err(Error::shape("forward (h0 layers)", &[h0.len()], &[cfg.layers]));
        }
        for h in h0 {
            if tape.shape(*h) != [batch, cfg.state_size()] {
                return Err(Error::shape("forward (h0)", tape.shape(*h), &[batch, cfg.state_size()]));
            }
        }
        let mut cur = Cursor { vars, pos: 0 };
        let embed = cur.next();
        let mut x = x;
        let mut final_states = Vec::with_capacity(cfg.layers);
        let mut states = Vec::with_capacity(cfg.layers);
        for (layer, &h) in h0.iter().enumerate() {
            let (g1, b1) = (cur.next(), cur.next());
            let z = tape.layer_norm(x, g1, b1, LN_EPS)?;
            let (y, hs) = match cfg.mixer {
                MixerKind::Ssm => self.ssm_mixer(tape, &mut cur, z, h)?,
                MixerKind::Gated => self.gated_mixer(tape, &mut cur, z, h, batch, steps)?,
                MixerKind::Rnn => self.rnn_mixer(tape, &mut cur, z, h, steps)?,
                MixerKind::Gru => self.gru_mixer(tape, &mut cur, z, h, steps)?,
            };
            check_states(tape, hs, layer)?;
            x = tape.add(x, y)?;
            let (g2, b2) = (cur.next(), cur.next());
            let (w1, bb1, w2, bb2) = (cur.next(), cur.next(), cur.next(), cur.next());
            let z = tape.layer_norm(x, g2, b2, LN_EPS)?;
            let a = tape.matmul_t(z, w1)?;
            let a = tape.add_broadcast(a, bb1)?;
            let a = tape.gelu(a);
            let a = tape.matmul_t(a, w2)?;
            let a = tape.add_broadcast(a, bb2)?;
            x = tape.add(x, a)?;
            let last = tape.slice(hs, 1, steps - 1, 1)?;
            final_states.push(tape.reshape(last, &[batch, cfg.state_size()])?);
            states.push(hs);
        }
        let (gf, bf) = (cur.next(), cur.next());
        let z = tape.layer_norm(x, gf, bf, LN_EPS)?;
        let head = if cfg.tie_embeddings { embed } else { cur.next() };
        let hb = cur.next();
        let logits = tape.matmul_t(z, head)?;
        let logits = tape.add_broadcast(logits, hb)?;
        if !tape.value(logits).is_finite() {
            let step = first_bad_step(tape.value(logits), batch, steps);
            return Err(Error::Overflow {
                layer: None,
                step,
                detail: "non-finite logits".into(),
            });
        }
        Ok(ForwardOutput {
            logits,
            final_states,
            states,
        })
    }

    fn activate(&self, tape: &mut Tape, v: Var) -> Var {
        match self.config.activation {
            Activation::Identity => v,
            Activation::Tanh => tape.tanh(v),
            Activation::Gelu => tape.gelu(v),
        }
    }

    fn ssm_mixer(&self, tape: &mut Tape, cur: &mut Cursor, z: Var, h0: Var) -> Result<(Var, Var)> {
        let (theta, u, b, c) = (cur.next(), cur.next(), cur.next(), cur.next());
        let e = tape.exp(theta);
        let ne = tape.scale(e, -1.0);
        let decay = tape.exp(ne);
        let drive = tape.matmul_t(z, u)?;
        let drive = tape.add_broadcast(drive, b)?;
        let hs = tape.linear_recurrence(decay, drive, h0, self.config.scan)?;
        let act = self.activate(tape, hs);
        let y = tape.matmul_t(act, c)?;
        Ok((y, hs))
    }

    fn gated_mixer(&self, tape: &mut Tape, cur: &mut Cursor, z: Var, h0: Var, batch: usize, steps: usize) -> Result<(Var, Var)> {
        let (a, g, gb, bm, c) = (cur.next(), cur.next(), cur.next(), cur.next(), cur.next());
        let (d, m) = (self.config.d_model, self.config.state_dim);
        let rows = batch * steps;
        let zf = tape.reshape(z, &[rows, d])?;
        let gx = tape.matmul_t(zf, g)?;
        let gx = tape.add_broadcast(gx, gb)?;
        let ones = tape.constant(Tensor::ones(&[rows, m]));
        let pre = tape.outer(ones, gx)?;
        let pre = tape.add_broadcast(pre, a)?;
        let w = tape.sigmoid(pre);
        let bx = tape.matmul_t(zf, bm)?;
        let u = tape.outer(bx, zf)?;
        let w = tape.reshape(w, &[batch, steps, m * d])?;
        let u = tape.reshape(u, &[batch, steps, m * d])?;
        let hs = tape.linear_recurrence(w, u, h0, self.config.scan)?;
        let act = self.activate(tape, hs);
        let act = tape.reshape(act, &[rows, m, d])?;
        let y = tape.mul_broadcast(act, c)?;
        let y = tape.sum_axis(y, 1)?;
        let y = tape.reshape(y, &[batch, steps, d])?;
        Ok((y, hs))
    }

    fn rnn_mixer(&self, tape: &mut Tape, cur: &mut Cursor, z: Var, h0: Var, steps: usize) -> Result<(Var, Var)> {
        let (w, u, b, c) = (cur.next(), cur.next(), cur.next(), cur.next());
        let batch = tape.shape(h0)[0];
        let m = self.config.state_dim;
        let drive = tape.matmul_t(z, u)?;
        let drive = tape.add_broadcast(drive, b)?;
        let mut h = h0;
        let mut hs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = tape.slice(drive, 1, t, 1)?;
            let xt = tape.reshape(xt, &[batch, m])?;
            let rec = tape.matmul_t(h, w)?;
            let pre = tape.add(rec, xt)?;
            h = tape.tanh(pre);
            hs.push(tape.reshape(h, &[batch, 1, m])?);
        }
        let hs = tape.concat(&hs, 1)?;
        let y = tape.matmul_t(hs, c)?;
        Ok((y, hs))
    }

    fn gru_mixer(&self, tape: &mut Tape, cur: &mut Cursor, z: Var, h0: Var, steps: usize) -> Result<(Var, Var)> {
        let (wx, bx, wh, bh, c) = (cur.next(), cur.next(), cur.next(), cur.next(), cur.next());
        let batch = tape.shape(h0)[0];
        let m = self.config.state_dim;
        let gx = tape.matmul_t(z, wx)?;
        let gx = tape.add_broadcast(gx, bx)?;
        let mut h = h0;
        let mut hs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = tape.slice(gx, 1, t, 1)?;
            let xt = tape.reshape(xt, &[batch, 3 * m])?;
            let gh = tape.matmul_t(h, wh)?;
            let gh = tape.add_broadcast(gh, bh)?;
            let part = |tape: &mut Tape, v: Var, k: usize| tape.slice(v, 1, k * m, m);
            let (xr, xz, xn) = (part(tape, xt, 0)?, part(tape, xt, 1)?, part(tape, xt, 2)?);
            let (hr, hz, hn) = (part(tape, gh, 0)?, part(tape, gh, 1)?, part(tape, gh, 2)?);
            let r = tape.add(xr, hr)?;
            let r = tape.sigmoid(r);
            let zg = tape.add(xz, hz)?;
            let zg = tape.sigmoid(zg);
            let rn = tape.mul(r, hn)?;
            let n = tape.add(xn, rn)?;
            let n = tape.tanh(n);
            let diff = tape.sub(h, n)?;
            let keep = tape.mul(zg, diff)?;
            h = tape.add(n, keep)?;
            hs.push(tape.reshape(h, &[batch, 1, m])?);
        }
        let hs = tape.concat(&hs, 1)?;
        let y = tape.matmul_t(hs, c)?;
        Ok((y, hs))
    }
}

fn first_bad_step(t: &Tensor, batch: usize, steps: usize) -> usize {
    let per_step = t.numel() / (batch * steps).max(1);
    let mut first = steps;
    for b in 0..batch {
        for s in 0..steps {
            let base = (b * steps + s) * per_step;
            if t.data()[base..base + per_step].iter().any(|v| !v.is_finite()) {
                first = first.min(s);
                break;
            }
        }
    }
    first
}

fn check_states(tape: &Tape, hs: Var, layer: usize) -> Result<()> {
    let v = tape.value(hs);
    if v.is_finite() {
        return Ok(());
    }
    let s = v.shape();
    Err(Error::Overflow {
        layer: Some(layer),
        step: first_bad_step(v, s[0], s[1]),
        detail: "non-finite hidden state".into(),
    })
}

#[cfg(test)]
mod tests;
