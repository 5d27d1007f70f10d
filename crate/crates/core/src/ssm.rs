//! Diagonal linear state-space layers.
//!
//! The recurrence `h_{k+1} = λ ⊙ h_k + (U x_k + b)` is evaluated three ways:
//! a step loop, a work-efficient associative scan, and an FFT convolution with
//! the kernel `λ^j`. The gated variant replaces `λ` and `U x + b` by the
//! input-dependent `W(x_k)` and `U(x_k)` and only admits the first two paths.
//!
//! Scan elements follow the composition convention where the newer element
//! sits on the left: `(W₁, h₁) ∘ (W₂, h₂) = (W₂ ⊙ W₁, h₁ + W₁ ⊙ h₂)`, and a
//! prefix is `e_k ∘ … ∘ e_1 ∘ (I, h₀)`.

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScanMethod {
    Sequential,
    #[default]
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    #[default]
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Gelu => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
            }
        }
    }
}

/// Decay applied by a recurrence over one sequence.
#[derive(Debug, Clone, Copy)]
pub enum Decay<'a> {
    /// One vector of length `n` for every step.
    Shared(&'a [f64]),
    /// `T × n` row-major, one row per step.
    PerStep(&'a [f64]),
}

impl Decay<'_> {
    #[inline]
    fn at(&self, step: usize, n: usize) -> &[f64] {
        match self {
            Decay::Shared(w) => w,
            Decay::PerStep(w) => &w[step * n..(step + 1) * n],
        }
    }
}

/// Maps an unconstrained parameter to a decay in (0, 1).
#[inline]
pub fn decay_from_param(theta: f64) -> f64 {
    (-theta.exp()).exp()
}

/// Inverse of [`decay_from_param`].
#[inline]
pub fn param_from_decay(lambda: f64) -> f64 {
    (-lambda.ln()).ln()
}

/// Time-invariant diagonal layer: `λ = exp(-exp(log_neg_decay))`, drive `U x + b`,
/// readout `C σ(h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmLayerParams {
    pub log_neg_decay: Vec<f64>,
    /// `m × d`
    pub u: Tensor,
    pub b: Vec<f64>,
    /// `d_out × m`
    pub c: Tensor,
    pub activation: Activation,
}

impl SsmLayerParams {
    /// Random layer with decays log-uniform in `[decay_min, decay_max]`.
    pub fn random<R: Rng + ?Sized>(
        m: usize,
        d: usize,
        d_out: usize,
        decay_min: f64,
        decay_max: f64,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let log_neg_decay = (0..m)
            .map(|_| {
                let ln = rng.gen_range(decay_min.ln()..=decay_max.ln());
                param_from_decay(ln.exp())
            })
            .collect();
        Self {
            log_neg_decay,
            u: Tensor::randn(&[m, d], 1.0 / (d as f64).sqrt(), rng),
            b: Tensor::randn(&[m], 0.1, rng).into_data(),
            c: Tensor::randn(&[d_out, m], 1.0 / (m as f64).sqrt(), rng),
            activation,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.log_neg_decay.len()
    }

    pub fn input_dim(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn decay(&self) -> Vec<f64> {
        self.log_neg_decay.iter().map(|&t| decay_from_param(t)).collect()
    }

    /// `U x + b`.
    pub fn drive(&self, x: &[f64]) -> Vec<f64> {
        let d = self.input_dim();
        self.b
            .iter()
            .enumerate()
            .map(|(i, &bi)| bi + dot(&self.u.data()[i * d..(i + 1) * d], x))
            .collect()
    }

    /// One element `(diag λ, U x + b)` per input.
    pub fn scan_elements(&self, xs: &[Vec<f64>]) -> Vec<ScanElement> {
        let w = self.decay();
        xs.iter()
            .map(|x| ScanElement {
                w: w.clone(),
                h: self.drive(x),
            })
            .collect()
    }
}

/// Input-dependent gating: `W(x)_{ij} = sigmoid(A_{ij} + (G x + g)_j)`,
/// `U(x)_{ij} = (B x)_i x_j`; the hidden state is `m × d` and the readout is
/// `y_j = Σ_i C_{ij} σ(h_{ij})`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedSsmParams {
    /// `A`, `m × d`
    pub gate_bias: Tensor,
    /// `G`, `d × d`
    pub gate_proj: Tensor,
    /// `g`, `d`
    pub gate_proj_bias: Vec<f64>,
    /// `B`, `m × d`
    pub input_proj: Tensor,
    /// `C`, `m × d`
    pub c: Tensor,
    pub activation: Activation,
}

impl GatedSsmParams {
    pub fn random<R: Rng + ?Sized>(m: usize, d: usize, activation: Activation, rng: &mut R) -> Self {
        Self {
            gate_bias: Tensor::full(&[m, d], 3.0),
            gate_proj: Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), rng),
            gate_proj_bias: vec![0.0; d],
            input_proj: Tensor::randn(&[m, d], 1.0 / (d as f64).sqrt(), rng),
            c: Tensor::randn(&[m, d], 1.0 / (m as f64).sqrt(), rng),
            activation,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.gate_bias.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.gate_bias.shape()[1]
    }

    /// `(W(x), U(x))`, both flattened `m × d`.
    pub fn gates(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (m, d) = (self.state_dim(), self.input_dim());
        let gx: Vec<f64> = (0..d)
            .map(|j| self.gate_proj_bias[j] + dot(&self.gate_proj.data()[j * d..(j + 1) * d], x))
            .collect();
        let bx: Vec<f64> = (0..m)
            .map(|i| dot(&self.input_proj.data()[i * d..(i + 1) * d], x))
            .collect();
        let mut w = vec![0.0; m * d];
        let mut u = vec![0.0; m * d];
        for i in 0..m {
            for j in 0..d {
                let z = self.gate_bias.data()[i * d + j] + gx[j];
                w[i * d + j] = 1.0 / (1.0 + (-z).exp());
                u[i * d + j] = bx[i] * x[j];
            }
        }
        (w, u)
    }

    pub fn scan_elements(&self, xs: &[Vec<f64>]) -> Vec<ScanElement> {
        xs.iter()
            .map(|x| {
                let (w, h) = self.gates(x);
                ScanElement { w, h }
            })
            .collect()
    }
}

/// Either layer family, for paths that only accept one of them.
#[derive(Debug, Clone, PartialEq)]
pub enum SsmParams {
    Diagonal(SsmLayerParams),
    Gated(GatedSsmParams),
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_finite(values: &[f64], step: usize, what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Overflow {
            layer: None,
            step,
            detail: format!("non-finite {what}"),
        })
    }
}

/// `h' = diag(λ) h + U x + b`; `step` is reported on overflow.
pub fn recurrence_step(h: &[f64], x: &[f64], p: &SsmLayerParams, step: usize) -> Result<Vec<f64>> {
    if h.len() != p.state_dim() || x.len() != p.input_dim() {
        return Err(Error::shape("recurrence_step", &[h.len(), x.len()], p.u.shape()));
    }
    check_finite(h, step, "hidden state")?;
    check_finite(x, step, "input")?;
    let drive = p.drive(x);
    let next: Vec<f64> = p
        .log_neg_decay
        .iter()
        .zip(h)
        .zip(&drive)
        .map(|((&t, &hi), &ui)| decay_from_param(t) * hi + ui)
        .collect();
    check_finite(&next, step, "hidden state")?;
    Ok(next)
}

/// `h' = W(x) ⊙ h + U(x)` with `h` flattened `m × d`.
pub fn gated_step(h: &[f64], x: &[f64], p: &GatedSsmParams, step: usize) -> Result<Vec<f64>> {
    let (m, d) = (p.state_dim(), p.input_dim());
    if h.len() != m * d || x.len() != d {
        return Err(Error::shape("gated_step", &[h.len(), x.len()], &[m, d]));
    }
    check_finite(h, step, "hidden state")?;
    check_finite(x, step, "input")?;
    let (w, u) = p.gates(x);
    let next: Vec<f64> = h.iter().zip(&w).zip(&u).map(|((hi, wi), ui)| wi * hi + ui).collect();
    check_finite(&next, step, "hidden state")?;
    Ok(next)
}

/// Step-by-step hidden states `h_1..h_T` of a diagonal layer.
pub fn sequential_states(p: &SsmLayerParams, xs: &[Vec<f64>], h0: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mut h = h0.to_vec();
    let mut out = Vec::with_capacity(xs.len());
    for (k, x) in xs.iter().enumerate() {
        h = recurrence_step(&h, x, p, k)?;
        out.push(h.clone());
    }
    Ok(out)
}

/// Step-by-step hidden states of a gated layer.
pub fn gated_sequential_states(p: &GatedSsmParams, xs: &[Vec<f64>], h0: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mut h = h0.to_vec();
    let mut out = Vec::with_capacity(xs.len());
    for (k, x) in xs.iter().enumerate() {
        h = gated_step(&h, x, p, k)?;
        out.push(h.clone());
    }
    Ok(out)
}

/// Operand of the associative scan: multiplier `w` and additive part `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanElement {
    pub w: Vec<f64>,
    pub h: Vec<f64>,
}

impl ScanElement {
    /// `(I, 0)`.
    pub fn identity(n: usize) -> Self {
        Self {
            w: vec![1.0; n],
            h: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    /// Applies the element to a state: `w ⊙ s + h`.
    pub fn apply(&self, s: &[f64]) -> Vec<f64> {
        self.w.iter().zip(&self.h).zip(s).map(|((w, h), s)| w * s + h).collect()
    }
}

/// `a ∘ b = (b.w ⊙ a.w, a.h + a.w ⊙ b.h)`; `a` is the newer element.
pub fn scan_combine(a: &ScanElement, b: &ScanElement) -> Result<ScanElement> {
    if a.w.len() != a.h.len() || b.w.len() != b.h.len() || a.h.len() != b.h.len() {
        return Err(Error::shape("scan_combine", &[a.w.len(), a.h.len()], &[b.w.len(), b.h.len()]));
    }
    Ok(ScanElement {
        w: b.w.iter().zip(&a.w).map(|(x, y)| x * y).collect(),
        h: a.h.iter().zip(&a.w).zip(&b.h).map(|((ah, aw), bh)| ah + aw * bh).collect(),
    })
}

/// All states `h_k = (e_k ∘ … ∘ e_1 ∘ (I, h₀)).h` via the up-sweep/down-sweep tree.
pub fn parallel_scan(elems: &[ScanElement], h0: &[f64]) -> Result<Vec<Vec<f64>>> {
    let n = h0.len();
    if elems.is_empty() {
        return Err(Error::invalid("parallel_scan over an empty sequence"));
    }
    let t = elems.len();
    let mut w = Vec::with_capacity(t * n);
    let mut h = Vec::with_capacity(t * n);
    for e in elems {
        if e.w.len() != n || e.h.len() != n {
            return Err(Error::shape("parallel_scan", &[e.w.len(), e.h.len()], &[n]));
        }
        w.extend_from_slice(&e.w);
        h.extend_from_slice(&e.h);
    }
    let mut out = vec![0.0; t * n];
    blelloch(&w, &h, h0, n, &mut out);
    Ok(out.chunks(n).map(|c| c.to_vec()).collect())
}

/// Composes `(earlier, later)` into slot `dst`: `later ∘ earlier`.
#[inline]
fn compose_into(w: &mut [f64], h: &mut [f64], n: usize, earlier: usize, later: usize) {
    for j in 0..n {
        let (we, he) = (w[earlier * n + j], h[earlier * n + j]);
        let (wl, hl) = (w[later * n + j], h[later * n + j]);
        w[later * n + j] = we * wl;
        h[later * n + j] = hl + wl * he;
    }
}

/// Work-efficient exclusive scan in tree order, then the inclusive fix-up.
/// `w`, `h` are `T × n`; writes `h_1..h_T` to `out`.
fn blelloch(w_in: &[f64], h_in: &[f64], h0: &[f64], n: usize, out: &mut [f64]) {
    let t = w_in.len() / n;
    let size = t.next_power_of_two();
    let mut w = vec![1.0; size * n];
    let mut h = vec![0.0; size * n];
    w[..t * n].copy_from_slice(w_in);
    h[..t * n].copy_from_slice(h_in);

    // up-sweep
    let mut stride = 1;
    while stride < size {
        let mut k = 0;
        while k < size {
            compose_into(&mut w, &mut h, n, k + stride - 1, k + 2 * stride - 1);
            k += 2 * stride;
        }
        stride *= 2;
    }

    // down-sweep
    let last = size - 1;
    w[last * n..].iter_mut().for_each(|x| *x = 1.0);
    h[last * n..].iter_mut().for_each(|x| *x = 0.0);
    let mut stride = size / 2;
    let mut tmp_w = vec![0.0; n];
    let mut tmp_h = vec![0.0; n];
    while stride >= 1 {
        let mut k = 0;
        while k < size {
            let left = k + stride - 1;
            let right = k + 2 * stride - 1;
            tmp_w.copy_from_slice(&w[left * n..(left + 1) * n]);
            tmp_h.copy_from_slice(&h[left * n..(left + 1) * n]);
            w.copy_within(right * n..(right + 1) * n, left * n);
            h.copy_within(right * n..(right + 1) * n, left * n);
            // right <- prefix-before-block, then the left half
            for j in 0..n {
                let (we, he) = (w[right * n + j], h[right * n + j]);
                w[right * n + j] = we * tmp_w[j];
                h[right * n + j] = tmp_h[j] + tmp_w[j] * he;
            }
            k += 2 * stride;
        }
        stride /= 2;
    }

    // inclusive prefix P_k = x_k ∘ E_k, applied to (I, h0)
    for k in 0..t {
        for j in 0..n {
            let (we, he) = (w[k * n + j], h[k * n + j]);
            let (wx, hx) = (w_in[k * n + j], h_in[k * n + j]);
            let pw = we * wx;
            let ph = hx + wx * he;
            out[k * n + j] = ph + pw * h0[j];
        }
    }
}

/// Runs `h_t = w_t ⊙ h_{t-1} + u_t` over one sequence (`drive` is `T × n`).
pub(crate) fn run_recurrence(method: ScanMethod, decay: Decay<'_>, drive: &[f64], h0: &[f64], n: usize, out: &mut [f64]) {
    let t = drive.len() / n.max(1);
    if t == 0 {
        return;
    }
    match method {
        ScanMethod::Sequential => {
            let mut prev = h0.to_vec();
            for step in 0..t {
                let w = decay.at(step, n);
                let dst = &mut out[step * n..(step + 1) * n];
                for j in 0..n {
                    dst[j] = w[j] * prev[j] + drive[step * n + j];
                }
                prev.copy_from_slice(dst);
            }
        }
        ScanMethod::Parallel => {
            let w: Vec<f64> = match decay {
                Decay::Shared(w) => w.iter().copied().cycle().take(t * n).collect(),
                Decay::PerStep(w) => w.to_vec(),
            };
            blelloch(&w, drive, h0, n, out);
        }
    }
}

/// Adjoint of [`run_recurrence`]: `a_t = g_t + w_{t+1} ⊙ a_{t+1}`.
pub(crate) fn run_adjoint(method: ScanMethod, decay: Decay<'_>, g: &[f64], n: usize, adj: &mut [f64]) {
    let t = g.len() / n.max(1);
    if t == 0 {
        return;
    }
    match method {
        ScanMethod::Sequential => {
            adj[(t - 1) * n..].copy_from_slice(&g[(t - 1) * n..]);
            for step in (0..t - 1).rev() {
                let w = decay.at(step + 1, n);
                for j in 0..n {
                    adj[step * n + j] = g[step * n + j] + w[j] * adj[(step + 1) * n + j];
                }
            }
        }
        ScanMethod::Parallel => {
            // reversed time: a'_s = w'_s ⊙ a'_{s-1} + g'_s with w'_s = w_{T-s}
            let mut w_rev = vec![0.0; t * n];
            let mut g_rev = vec![0.0; t * n];
            for s in 0..t {
                g_rev[s * n..(s + 1) * n].copy_from_slice(&g[(t - 1 - s) * n..(t - s) * n]);
                if s > 0 {
                    w_rev[s * n..(s + 1) * n].copy_from_slice(decay.at(t - s, n));
                }
            }
            let zeros = vec![0.0; n];
            let mut rev = vec![0.0; t * n];
            blelloch(&w_rev, &g_rev, &zeros, n, &mut rev);
            for s in 0..t {
                adj[(t - 1 - s) * n..(t - s) * n].copy_from_slice(&rev[s * n..(s + 1) * n]);
            }
        }
    }
}

/// `h_k = λ^k ⊙ h₀ + Σ_{j<k} λ^j ⊙ (U x_{k-1-j} + b)` by zero-padded FFT
/// convolution. Forward only; gated layers are rejected.
pub fn fft_convolve(p: &SsmParams, xs: &[Vec<f64>], h0: &[f64]) -> Result<Vec<Vec<f64>>> {
    let p = match p {
        SsmParams::Diagonal(p) => p,
        SsmParams::Gated(_) => {
            return Err(Error::Unsupported(
                "fft_convolve needs a time-invariant layer; gated layers must use a scan".into(),
            ))
        }
    };
    let m = p.state_dim();
    if h0.len() != m {
        return Err(Error::shape("fft_convolve", &[h0.len()], &[m]));
    }
    let t = xs.len();
    if t == 0 {
        return Ok(Vec::new());
    }
    let drives: Vec<Vec<f64>> = xs.iter().map(|x| p.drive(x)).collect();
    let lambda = p.decay();
    let size = (2 * t).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut out = vec![vec![0.0; m]; t];
    let mut kernel = vec![Complex::new(0.0, 0.0); size];
    let mut signal = vec![Complex::new(0.0, 0.0); size];
    for i in 0..m {
        let mut pow = 1.0;
        for (j, k) in kernel.iter_mut().enumerate() {
            *k = if j < t {
                let v = Complex::new(pow, 0.0);
                pow *= lambda[i];
                v
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        for (j, s) in signal.iter_mut().enumerate() {
            *s = Complex::new(if j < t { drives[j][i] } else { 0.0 }, 0.0);
        }
        fwd.process(&mut kernel);
        fwd.process(&mut signal);
        for (s, k) in signal.iter_mut().zip(&kernel) {
            *s *= k;
        }
        inv.process(&mut signal);
        let scale = 1.0 / size as f64;
        let mut decay_pow = lambda[i];
        for (k, row) in out.iter_mut().enumerate() {
            row[i] = signal[k].re * scale + decay_pow * h0[i];
            decay_pow *= lambda[i];
        }
    }
    Ok(out)
}

/// `y_j = Σ_i C_{ij} σ(h_{ij})` for each gated state `h_k` (`m × d`).
pub fn gated_readout(hs: &[Vec<f64>], p: &GatedSsmParams) -> Result<Vec<Vec<f64>>> {
    let (m, d) = (p.state_dim(), p.input_dim());
    hs.iter()
        .map(|h| {
            if h.len() != m * d {
                return Err(Error::shape("gated_readout", &[h.len()], &[m, d]));
            }
            let mut y = vec![0.0; d];
            for i in 0..m {
                for j in 0..d {
                    y[j] += p.c.data()[i * d + j] * p.activation.apply(h[i * d + j]);
                }
            }
            Ok(y)
        })
        .collect()
}

/// `ŷ_k = C σ(h_k)`.
pub fn readout(hs: &[Vec<f64>], c: &Tensor, activation: Activation) -> Result<Vec<Vec<f64>>> {
    let (d_out, m) = (c.shape()[0], c.shape()[1]);
    hs.iter()
        .map(|h| {
            if h.len() != m {
                return Err(Error::shape("readout", &[h.len()], c.shape()));
            }
            let act: Vec<f64> = h.iter().map(|&v| activation.apply(v)).collect();
            Ok((0..d_out).map(|r| dot(&c.data()[r * m..(r + 1) * m], &act)).collect())
        })
        .collect()
}
