//! Memory kernels `ρ(s)` of linear functionals `y_t = ∫_0^∞ ρ_s x_{t-s} ds`,
//! exponential-sum fits `ρ̂(s) = Σ_i c_i e^{-λ_i s}` on a finite window
//! `[0, T]`, and the error of using such a fit beyond the window.
//!
//! Under `u = e^{-s}` the fit becomes `Σ_i c_i u^{λ_i}`, fitted on
//! `u ∈ [e^{-T}, 1]`; evaluating it for `s > T` is extrapolation towards `u = 0`.

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tail mass below which an infinite upper limit is truncated.
pub const TAIL_TOLERANCE: f64 = 1e-12;

/// Largest `s` at which `u = e^{-s}` is still a normal float.
pub const U_DOMAIN_MAX_S: f64 = 700.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MemoryKernel {
    /// `Σ_i c_i e^{-λ_i s}`
    ExpSum { coeffs: Vec<f64>, rates: Vec<f64> },
    /// `(1 + s)^{-α}`, `α > 1`
    PowerLaw { alpha: f64 },
    /// `exp(-(s - center)² / (2 width²))`
    ShiftedGaussian { center: f64, width: f64 },
}

impl MemoryKernel {
    /// Parses `exp:c@λ,c@λ`, `power_law:α` or `gaussian:center,width`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (family, args) = spec.split_once(':').unwrap_or((spec, ""));
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad number `{s}` in kernel `{spec}`")))
        };
        let k = match family {
            "exp" | "exp_sum" => {
                let mut coeffs = Vec::new();
                let mut rates = Vec::new();
                for term in args.split(',').filter(|t| !t.trim().is_empty()) {
                    let (c, l) = term
                        .split_once('@')
                        .ok_or_else(|| Error::invalid(format!("exp_sum term `{term}` must be c@rate")))?;
                    coeffs.push(num(c)?);
                    rates.push(num(l)?);
                }
                MemoryKernel::ExpSum { coeffs, rates }
            }
            "power_law" => MemoryKernel::PowerLaw { alpha: num(args)? },
            "gaussian" | "shifted_gaussian" => {
                let (c, w) = args
                    .split_once(',')
                    .ok_or_else(|| Error::invalid("gaussian kernel needs center,width"))?;
                MemoryKernel::ShiftedGaussian {
                    center: num(c)?,
                    width: num(w)?,
                }
            }
            other => return Err(Error::invalid(format!("unknown kernel family `{other}`"))),
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MemoryKernel::ExpSum { coeffs, rates } => {
                if coeffs.len() != rates.len() || rates.iter().any(|&l| !(l > 0.0)) {
                    return Err(Error::invalid("exp_sum needs one positive rate per coefficient"));
                }
            }
            MemoryKernel::PowerLaw { alpha } => {
                if !(*alpha > 1.0) {
                    return Err(Error::invalid("power_law needs alpha > 1 for a finite L1 norm"));
                }
            }
            MemoryKernel::ShiftedGaussian { width, .. } => {
                if !(*width > 0.0) {
                    return Err(Error::invalid("gaussian width must be positive"));
                }
            }
        }
        Ok(())
    }

    pub fn family(&self) -> &'static str {
        match self {
            MemoryKernel::ExpSum { .. } => "exp_sum",
            MemoryKernel::PowerLaw { .. } => "power_law",
            MemoryKernel::ShiftedGaussian { .. } => "shifted_gaussian",
        }
    }

    pub fn eval(&self, s: f64) -> f64 {
        match self {
            MemoryKernel::ExpSum { coeffs, rates } => exp_sum(coeffs, rates, s),
            MemoryKernel::PowerLaw { alpha } => (1.0 + s).powf(-alpha),
            MemoryKernel::ShiftedGaussian { center, width } => (-(s - center).powi(2) / (2.0 * width * width)).exp(),
        }
    }

    /// Upper bound on `∫_s^∞ |ρ|`.
    pub fn tail_bound(&self, s: f64) -> f64 {
        match self {
            MemoryKernel::ExpSum { coeffs, rates } => exp_tail(coeffs, rates, s),
            MemoryKernel::PowerLaw { alpha } => (1.0 + s).powf(1.0 - alpha) / (alpha - 1.0),
            MemoryKernel::ShiftedGaussian { center, width } => {
                // Mills-ratio bound, or the full mass when s is left of the centre.
                let z = (s - center) / width;
                let full = width * (2.0 * std::f64::consts::PI).sqrt();
                if z <= 1.0 {
                    full
                } else {
                    width * (-z * z / 2.0).exp() / z
                }
            }
        }
    }

    /// Declared `|ρ|_1` bound.
    pub fn l1_bound(&self) -> f64 {
        self.tail_bound(0.0)
    }
}

fn exp_sum(coeffs: &[f64], rates: &[f64], s: f64) -> f64 {
    coeffs.iter().zip(rates).map(|(c, l)| c * (-l * s).exp()).sum()
}

fn exp_tail(coeffs: &[f64], rates: &[f64], s: f64) -> f64 {
    coeffs.iter().zip(rates).map(|(c, l)| c.abs() / l * (-l * s).exp()).sum()
}

/// `ρ̂(s) = Σ_i c_i e^{-λ_i s}` fitted on `[0, window]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedKernel {
    pub coeffs: Vec<f64>,
    pub rates: Vec<f64>,
    pub window: f64,
    /// RMS of `ρ - ρ̂` on the fitting grid.
    pub residual_rms: f64,
    /// Ridge added to the normal equations, 0 when none was needed.
    pub ridge: f64,
}

impl FittedKernel {
    pub fn eval(&self, s: f64) -> f64 {
        exp_sum(&self.coeffs, &self.rates, s)
    }

    /// `Σ_i c_i u^{λ_i}`.
    pub fn eval_u(&self, u: f64) -> f64 {
        self.coeffs.iter().zip(&self.rates).map(|(c, l)| c * u.powf(*l)).sum()
    }

    pub fn tail_bound(&self, s: f64) -> f64 {
        exp_tail(&self.coeffs, &self.rates, s)
    }

    /// The zero kernel, for reference comparisons.
    pub fn zero(window: f64) -> Self {
        Self {
            coeffs: Vec::new(),
            rates: Vec::new(),
            window,
            residual_rms: f64::NAN,
            ridge: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FitMethod {
    /// Log-spaced rates in `[1/T, 10]`, coefficients by linear least squares.
    #[default]
    FixedRates,
    /// Rates and coefficients refined jointly by gradient descent from the
    /// fixed-rate solution.
    Joint { iters: usize, lr: f64 },
}

/// `m` rates log-spaced in `[1/T, 10]`.
pub fn log_spaced_rates(m: usize, window: f64) -> Vec<f64> {
    let (lo, hi) = ((1.0 / window).ln(), 10f64.ln());
    if m == 1 {
        return vec![((lo + hi) / 2.0).exp()];
    }
    (0..m).map(|i| (lo + (hi - lo) * i as f64 / (m - 1) as f64).exp()).collect()
}

fn grid(window: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| window * i as f64 / (n - 1) as f64).collect()
}

fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * n + i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Least-squares coefficients for fixed `rates` on a uniform grid of `grid_n`
/// points over `[0, window]`.
pub fn fit_with_rates(target: &MemoryKernel, rates: &[f64], window: f64, grid_n: usize) -> Result<FittedKernel> {
    target.validate()?;
    let m = rates.len();
    if m == 0 || rates.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::invalid("at least one positive rate is required"));
    }
    if !(window > 0.0) {
        return Err(Error::invalid("fit window must be positive"));
    }
    if grid_n < 10 * m {
        return Err(Error::invalid(format!("grid_n = {grid_n} must be at least 10 m = {}", 10 * m)));
    }
    let s = grid(window, grid_n);
    let y: Vec<f64> = s.iter().map(|&x| target.eval(x)).collect();
    let phi: Vec<Vec<f64>> = s.iter().map(|&x| rates.iter().map(|l| (-l * x).exp()).collect()).collect();
    let mut gram = vec![0.0; m * m];
    let mut rhs = vec![0.0; m];
    for (row, yi) in phi.iter().zip(&y) {
        for i in 0..m {
            rhs[i] += row[i] * yi;
            for j in 0..m {
                gram[i * m + j] += row[i] * row[j];
            }
        }
    }
    let mut ridge = 0.0;
    let coeffs = match cholesky_solve(&gram, &rhs, m) {
        Some(c) => c,
        None => {
            let scale = (0..m).map(|i| gram[i * m + i]).sum::<f64>() / m as f64;
            let mut delta = 1e-15;
            loop {
                ridge = delta * scale;
                let mut g = gram.clone();
                for i in 0..m {
                    g[i * m + i] += ridge;
                }
                if let Some(c) = cholesky_solve(&g, &rhs, m) {
                    warn!("normal equations singular for m = {m}; solved with ridge {ridge:.3e}");
                    break c;
                }
                delta *= 10.0;
                if delta > 1.0 {
                    return Err(Error::invalid("normal equations could not be regularized"));
                }
            }
        }
    };
    let residual_rms = (phi
        .iter()
        .zip(&y)
        .map(|(row, yi)| {
            let r = yi - row.iter().zip(&coeffs).map(|(p, c)| p * c).sum::<f64>();
            r * r
        })
        .sum::<f64>()
        / grid_n as f64)
        .sqrt();
    Ok(FittedKernel {
        coeffs,
        rates: rates.to_vec(),
        window,
        residual_rms,
        ridge,
    })
}

/// Fits `m` exponentials to `target` on `[0, window]`.
pub fn fit_kernel(target: &MemoryKernel, m: usize, window: f64, grid_n: usize, method: FitMethod) -> Result<FittedKernel> {
    if m == 0 {
        return Err(Error::invalid("m must be at least 1"));
    }
    let fixed = fit_with_rates(target, &log_spaced_rates(m, window), window, grid_n)?;
    match method {
        FitMethod::FixedRates => Ok(fixed),
        FitMethod::Joint { iters, lr } => Ok(joint_refine(target, fixed, grid_n, iters, lr)),
    }
}

/// Plain gradient descent on the grid MSE over `(c_i, log λ_i)`.
fn joint_refine(target: &MemoryKernel, start: FittedKernel, grid_n: usize, iters: usize, lr: f64) -> FittedKernel {
    let s = grid(start.window, grid_n);
    let y: Vec<f64> = s.iter().map(|&x| target.eval(x)).collect();
    let m = start.coeffs.len();
    let mut c = start.coeffs.clone();
    let mut logl: Vec<f64> = start.rates.iter().map(|l| l.ln()).collect();
    let n = grid_n as f64;
    for it in 0..iters {
        let mut gc = vec![0.0; m];
        let mut gl = vec![0.0; m];
        for (&si, &yi) in s.iter().zip(&y) {
            let e: Vec<f64> = logl.iter().map(|ll| (-ll.exp() * si).exp()).collect();
            let r = e.iter().zip(&c).map(|(ei, ci)| ei * ci).sum::<f64>() - yi;
            for i in 0..m {
                gc[i] += 2.0 * r * e[i] / n;
                gl[i] += 2.0 * r * c[i] * e[i] * (-si) * logl[i].exp() / n;
            }
        }
        for i in 0..m {
            c[i] -= lr * gc[i];
            logl[i] -= lr * gl[i];
        }
        if c.iter().chain(&logl).any(|v| !v.is_finite()) {
            warn!("joint kernel fit diverged at iteration {it}; keeping the last finite iterate");
            return start;
        }
    }
    let rates: Vec<f64> = logl.iter().map(|l| l.exp()).collect();
    let residual_rms = (s
        .iter()
        .zip(&y)
        .map(|(&si, yi)| (exp_sum(&c, &rates, si) - yi).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    FittedKernel {
        coeffs: c,
        rates,
        residual_rms,
        ..start
    }
}

/// Upper limit of an error integral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Upper {
    At(f64),
    Infinity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationError {
    /// `∫_T^t |ρ - ρ̂| ds`
    pub extrapolation: f64,
    /// `∫_0^T |ρ - ρ̂| ds`
    pub in_window: f64,
    /// Where an infinite upper limit was cut.
    pub truncated_at: Option<f64>,
}

/// Composite Simpson on `[a, b]` with `n` (made even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (b - a) / n as f64;
    let mut sum = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * f(a + h * i as f64);
    }
    sum * h / 3.0
}

/// Smallest `s ≥ from` (by doubling) where both tails fall below [`TAIL_TOLERANCE`].
fn truncation_point(fit: &FittedKernel, target: &MemoryKernel, from: f64) -> f64 {
    let mut s = from.max(1.0);
    while fit.tail_bound(s) + target.tail_bound(s) > TAIL_TOLERANCE && s < 1e15 {
        s *= 2.0;
    }
    s
}

/// `∫_a^b |ρ - ρ̂|` by Simpson, on a log-stretched variable when the range is long.
fn abs_error_integral(fit: &FittedKernel, target: &MemoryKernel, a: f64, b: f64, n: usize) -> f64 {
    let f = |s: f64| (target.eval(s) - fit.eval(s)).abs();
    if b - a <= 100.0 {
        simpson(f, a, b, n)
    } else {
        // s = a + e^v - 1, ds = e^v dv
        simpson(|v: f64| f(a + v.exp_m1()) * v.exp(), 0.0, (b - a).ln_1p(), n)
    }
}

/// `∫_T^t |ρ_s - ρ̂_s| ds` with `quad_n` Simpson panels, plus the in-window error.
pub fn extrapolation_error(fit: &FittedKernel, target: &MemoryKernel, window: f64, upper: Upper, quad_n: usize) -> Result<ExtrapolationError> {
    if quad_n < 2 {
        return Err(Error::invalid("quad_n must be at least 2"));
    }
    let (t, truncated_at) = match upper {
        Upper::At(t) => {
            if !(t > window) {
                return Err(Error::invalid(format!("upper limit {t} must exceed the window {window}")));
            }
            (t, None)
        }
        Upper::Infinity => {
            let s = truncation_point(fit, target, window);
            info!("infinite upper limit truncated at s = {s} (tail < {TAIL_TOLERANCE:e})");
            (s, Some(s))
        }
    };
    Ok(ExtrapolationError {
        extrapolation: abs_error_integral(fit, target, window, t, quad_n),
        in_window: abs_error_integral(fit, target, 0.0, window, quad_n),
        truncated_at,
    })
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: usize) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: usize) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || !delta.is_finite() || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, depth)
}

/// One sample of the `u = e^{-s}` view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct USample {
    pub u: f64,
    /// `𝒯ρ_u = ρ_{-ln u}`
    pub target: f64,
    /// `Σ_i c_i u^{λ_i}`
    pub poly: f64,
    /// `|𝒯ρ_u - Σ_i c_i u^{λ_i}| / u`
    pub integrand: f64,
}

fn u_sample(fit: &FittedKernel, target: &MemoryKernel, u: f64) -> USample {
    let t = target.eval(-u.ln());
    let p = fit.eval_u(u);
    USample {
        u,
        target: t,
        poly: p,
        integrand: (t - p).abs() / u,
    }
}

/// `n` samples with `s = -ln u` evenly spaced over `[0, s_max]`.
pub fn change_of_variable_view(fit: &FittedKernel, target: &MemoryKernel, s_max: f64, n: usize) -> Vec<USample> {
    (0..n)
        .map(|i| {
            let s = if n > 1 { s_max * i as f64 / (n - 1) as f64 } else { 0.0 };
            u_sample(fit, target, (-s).exp())
        })
        .collect()
}

/// `∫_{e^{-t}}^{e^{-T}} |𝒯ρ_u - Σ c_i u^{λ_i}| / u du` by adaptive Simpson.
pub fn u_domain_error(fit: &FittedKernel, target: &MemoryKernel, window: f64, upper: Upper, tol: f64) -> Result<f64> {
    let t = match upper {
        Upper::At(t) if t > window => t,
        Upper::At(t) => return Err(Error::invalid(format!("upper limit {t} must exceed the window {window}"))),
        Upper::Infinity => truncation_point(fit, target, window),
    };
    let f = |u: f64| u_sample(fit, target, u).integrand;
    // Pieces span a bounded range of ln u.
    let s_end = t.min(U_DOMAIN_MAX_S);
    let mut total = 0.0;
    let mut s_lo = window;
    while s_lo < s_end {
        let s_hi = (s_lo + s_lo.clamp(1.0, 16.0)).min(s_end);
        total += adaptive_simpson(&f, (-s_hi).exp(), (-s_lo).exp(), tol, 60);
        s_lo = s_hi;
    }
    // u = e^{-s} underflows past this point; finish the tail in s.
    if t > s_end {
        total += abs_error_integral(fit, target, s_end, t, 200_000);
    }
    Ok(total)
}

/// Inference-time error split for `t > T`:
/// `|y_t - ŷ_t| ≤ |∫_t^∞ ρ x - ŷ_0| + |∫_T^t (ρ-ρ̂) x| + |∫_0^T (ρ-ρ̂) x|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorDecomposition {
    /// `|∫_t^∞ ρ_s x_{t-s} ds - ŷ_0|`: history the model never sees.
    pub history_term: f64,
    /// `|∫_T^t (ρ_s - ρ̂_s) x_{t-s} ds|`: use of the fit beyond its window.
    pub extension_term: f64,
    /// `|∫_0^T (ρ_s - ρ̂_s) x_{t-s} ds|`: in-window misfit.
    pub window_term: f64,
    /// `|y_t - ŷ_t|` with `ŷ_t = ∫_0^t ρ̂_s x_{t-s} ds + ŷ_0`.
    pub total_error: f64,
}

impl ErrorDecomposition {
    pub fn holds(&self, tol: f64) -> bool {
        self.total_error <= self.history_term + self.extension_term + self.window_term + tol
    }
}

/// Evaluates the decomposition for input `x(τ)`, `τ ≤ t`, with `|x| ≤ x_sup`.
pub fn decompose_error(
    target: &MemoryKernel,
    fit: &FittedKernel,
    signal: &dyn Fn(f64) -> f64,
    x_sup: f64,
    window: f64,
    t: f64,
    y0_hat: f64,
    quad_n: usize,
) -> Result<ErrorDecomposition> {
    if !x_sup.is_finite() || x_sup < 0.0 {
        return Err(Error::invalid("input signal must have a finite bound"));
    }
    if !(t > window) || quad_n < 2 {
        return Err(Error::invalid("need t > T and quad_n ≥ 2"));
    }
    let x = |s: f64| {
        let v = signal(t - s);
        if v.abs() > x_sup * (1.0 + 1e-12) || !v.is_finite() {
            f64::NAN
        } else {
            v
        }
    };
    let s_max = truncation_point(fit, target, t).max(t + 1.0);
    let hist_raw = integrate_range(&|s| target.eval(s) * x(s), t, s_max, quad_n);
    let diff = |s: f64| (target.eval(s) - fit.eval(s)) * x(s);
    let ext = integrate_range(&diff, window, t, quad_n);
    let win = integrate_range(&diff, 0.0, window, quad_n);
    let vals = [hist_raw, ext, win];
    if vals.iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("input signal exceeds its declared bound"));
    }
    let y = integrate_range(&|s| target.eval(s) * x(s), 0.0, t, quad_n) + hist_raw;
    let y_hat = integrate_range(&|s| fit.eval(s) * x(s), 0.0, t, quad_n) + y0_hat;
    Ok(ErrorDecomposition {
        history_term: (hist_raw - y0_hat).abs(),
        extension_term: ext.abs(),
        window_term: win.abs(),
        total_error: (y - y_hat).abs(),
    })
}

fn integrate_range(f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    if b - a <= 100.0 {
        simpson(f, a, b, n)
    } else {
        simpson(|v: f64| f(a + v.exp_m1()) * v.exp(), 0.0, (b - a).ln_1p(), n)
    }
}

/// Held-out error for each `m`, all fitted on `[0, window]` and scored on `[window, t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitRow {
    pub m: usize,
    pub residual_rms: f64,
    pub in_window: f64,
    pub extrapolation: f64,
    pub ridge: f64,
}

pub fn overfit_sweep(target: &MemoryKernel, ms: &[usize], window: f64, t: f64, grid_factor: usize, quad_n: usize) -> Result<Vec<OverfitRow>> {
    ms.iter()
        .map(|&m| {
            let fit = fit_kernel(target, m, window, grid_factor * m.max(10), FitMethod::FixedRates)?;
            let e = extrapolation_error(&fit, target, window, Upper::At(t), quad_n)?;
            Ok(OverfitRow {
                m,
                residual_rms: fit.residual_rms,
                in_window: e.in_window,
                extrapolation: e.extrapolation,
                ridge: fit.ridge,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
