//! Magnitude budgets for diagonal recurrences under finite precision, and a
//! monitor that flags hidden states approaching the representable limit.
//!
//! For `h_{k+1} = Λ h_k + U x_k` with `0 ≤ λ = max diag(Λ) < 1`,
//!
//! ```text
//! |h_T|_∞ ≤ |h_0|_∞ + (1 - λ^T) / (1 - λ) · |U|_1 · sup_k |x_k|_∞
//! ```
//!
//! where `|U|_1` is the largest absolute row sum (the induced ∞→∞ norm).
//! Keeping the `T → ∞` limit below the representable maximum `M` requires
//! `λ < 1 - |U|_1 sup|x| / (M - |h_0|_∞)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityBudget {
    /// Largest representable magnitude `M`.
    pub max_value: f64,
    /// Largest decay `λ`.
    pub lambda: f64,
    /// `|U|_1`, largest absolute row sum.
    pub u_norm1: f64,
    /// `sup_k |x_k|_∞`.
    pub x_sup: f64,
    /// `|h_0|_∞`.
    pub h0_inf: f64,
}

impl StabilityBudget {
    pub fn validate(&self) -> Result<()> {
        let fields = [self.max_value, self.lambda, self.u_norm1, self.x_sup, self.h0_inf];
        if fields.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::invalid("budget entries must be non-negative numbers"));
        }
        if self.max_value <= self.h0_inf {
            return Err(Error::invalid(format!(
                "M = {} must exceed |h0| = {}",
                self.max_value, self.h0_inf
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Horizon {
    Steps(u64),
    Infinite,
}

/// Bound on `|h_T|_∞`.
pub fn hidden_bound(b: &StabilityBudget, horizon: Horizon) -> Result<f64> {
    b.validate()?;
    let drive = b.u_norm1 * b.x_sup;
    let gain = match horizon {
        Horizon::Infinite => {
            if b.lambda >= 1.0 {
                return Err(Error::invalid(format!(
                    "bound diverges: λ = {} ≥ 1 over an infinite horizon",
                    b.lambda
                )));
            }
            1.0 / (1.0 - b.lambda)
        }
        Horizon::Steps(t) => geometric_gain(b.lambda, t),
    };
    if drive == 0.0 {
        return Ok(b.h0_inf);
    }
    Ok(b.h0_inf + gain * drive)
}

/// `Σ_{j<T} λ^j = (1 - λ^T) / (1 - λ)`, equal to `T` at `λ = 1`.
pub fn geometric_gain(lambda: f64, t: u64) -> f64 {
    if t == 0 {
        return 0.0;
    }
    if lambda == 1.0 {
        return t as f64;
    }
    if lambda == 0.0 {
        return 1.0;
    }
    let lt = (t as f64 * lambda.ln()).exp_m1();
    lt / (lambda - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafeDecay {
    pub lambda_star: f64,
    /// False when no decay in `[0, 1)` keeps the bound under `M`.
    pub feasible: bool,
}

/// `λ* = 1 - |U|_1 sup|x| / (M - |h0|)`, clamped to `[0, 1)`.
pub fn max_safe_decay(b: &StabilityBudget) -> Result<SafeDecay> {
    b.validate()?;
    let drive = b.u_norm1 * b.x_sup;
    let room = b.max_value - b.h0_inf;
    if drive >= room {
        return Ok(SafeDecay {
            lambda_star: 0.0,
            feasible: false,
        });
    }
    let ratio = drive / room;
    let lambda_star = if room.is_infinite() { 1.0 } else { 1.0 - ratio };
    Ok(SafeDecay {
        lambda_star: lambda_star.clamp(0.0, 1.0 - f64::EPSILON / 2.0),
        feasible: true,
    })
}

/// Largest absolute row sum of a 2-D matrix.
pub fn u_norm1(u: &Tensor) -> Result<f64> {
    if u.ndim() != 2 {
        return Err(Error::shape("u_norm1", u.shape(), &[0, 0]));
    }
    let cols = u.shape()[1];
    Ok(u.data()
        .chunks(cols.max(1))
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max))
}

/// `max_k |h_k|_∞` over `steps` steps of `h' = λ ⊙ h + U x` where every `x_k`
/// is sign-aligned with the row of `U` that has the largest absolute sum.
pub fn adversarial_simulation(decay: &[f64], u: &Tensor, x_sup: f64, h0: &[f64], steps: u64) -> Result<f64> {
    let (m, d) = (u.shape()[0], u.shape()[1]);
    if decay.len() != m || h0.len() != m {
        return Err(Error::shape("adversarial_simulation", &[decay.len(), h0.len()], u.shape()));
    }
    let row = (0..m)
        .max_by(|&a, &b| {
            let sa: f64 = u.data()[a * d..(a + 1) * d].iter().map(|v| v.abs()).sum();
            let sb: f64 = u.data()[b * d..(b + 1) * d].iter().map(|v| v.abs()).sum();
            sa.total_cmp(&sb)
        })
        .unwrap_or(0);
    let x: Vec<f64> = u.data()[row * d..(row + 1) * d]
        .iter()
        .map(|&v| if v >= 0.0 { x_sup } else { -x_sup })
        .collect();
    let drive: Vec<f64> = (0..m)
        .map(|i| u.data()[i * d..(i + 1) * d].iter().zip(&x).map(|(a, b)| a * b).sum())
        .collect();
    let mut h = h0.to_vec();
    let mut peak = h.iter().map(|v| v.abs()).fold(0.0, f64::max);
    for _ in 0..steps {
        for i in 0..m {
            h[i] = decay[i] * h[i] + drive[i];
        }
        peak = peak.max(h.iter().map(|v| v.abs()).fold(0.0, f64::max));
    }
    Ok(peak)
}

/// First step at which the scalar recurrence `h' = λ h + c`, `h_0 = h0`,
/// exceeds `limit`, if it does within `steps`.
pub fn first_exceedance(lambda: f64, c: f64, h0: f64, limit: f64, steps: u64) -> Option<u64> {
    let mut h = h0;
    for k in 1..=steps {
        h = lambda * h + c;
        if h.abs() > limit {
            return Some(k);
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonitorKind {
    NearLimit,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorEvent {
    pub step: usize,
    pub layer: usize,
    pub max_abs_h: f64,
    pub lambda_max: f64,
    pub kind: MonitorKind,
}

/// Flags layers whose hidden states exceed `fraction · M` or are non-finite.
#[derive(Debug, Clone)]
pub struct OverflowMonitor {
    pub max_value: f64,
    pub fraction: f64,
}

impl OverflowMonitor {
    pub fn new(precision: Precision) -> Self {
        Self {
            max_value: precision.max_value(),
            fraction: 0.9,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.fraction * self.max_value
    }

    /// `max_abs_h[l]` is the largest `|h|` of layer `l` this step (NaN if any
    /// entry was non-finite); `lambda_max[l]` its largest decay.
    pub fn observe(&self, step: usize, max_abs_h: &[f64], lambda_max: &[f64]) -> Vec<MonitorEvent> {
        max_abs_h
            .iter()
            .enumerate()
            .filter_map(|(layer, &h)| {
                let kind = if !h.is_finite() {
                    MonitorKind::NonFinite
                } else if h > self.threshold() {
                    MonitorKind::NearLimit
                } else {
                    return None;
                };
                Some(MonitorEvent {
                    step,
                    layer,
                    max_abs_h: h,
                    lambda_max: lambda_max.get(layer).copied().unwrap_or(f64::NAN),
                    kind,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn budget(m: f64, l: f64, u: f64, x: f64, h0: f64) -> StabilityBudget {
        StabilityBudget {
            max_value: m,
            lambda: l,
            u_norm1: u,
            x_sup: x,
            h0_inf: h0,
        }
    }

    #[test]
    fn examples() {
        let b = budget(1e9, 0.5, 1.0, 1.0, 0.0);
        assert_eq!(hidden_bound(&b, Horizon::Infinite).unwrap(), 2.0);
        assert_eq!(hidden_bound(&budget(1e9, 0.5, 1.0, 0.0, 3.0), Horizon::Steps(10)).unwrap(), 3.0);
        let s = max_safe_decay(&budget(100.0, 0.0, 1.0, 1.0, 0.0)).unwrap();
        assert!((s.lambda_star - 0.99).abs() < 1e-15 && s.feasible);
        let s = max_safe_decay(&budget(f64::INFINITY, 0.0, 1.0, 1.0, 0.0)).unwrap();
        assert!(s.lambda_star > 1.0 - 1e-15);
        let s = max_safe_decay(&budget(1.0, 0.0, 2.0, 1.0, 0.0)).unwrap();
        assert!(!s.feasible && s.lambda_star == 0.0);
        assert!(hidden_bound(&budget(10.0, 1.0, 1.0, 1.0, 0.0), Horizon::Infinite).is_err());
        assert_eq!(hidden_bound(&budget(10.0, 1.0, 1.0, 1.0, 0.0), Horizon::Steps(7)).unwrap(), 7.0);
        assert!(max_safe_decay(&budget(1.0, 0.5, 1.0, 1.0, 2.0)).is_err());
    }

    #[test]
    fn bound_is_monotone_in_every_argument() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let b = budget(1e300, rng.gen_range(0.0..0.999), rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0));
            let t = rng.gen_range(1..200u64);
            let base = hidden_bound(&b, Horizon::Steps(t)).unwrap();
            let bump = rng.gen_range(0.0..0.5);
            let variants = [
                hidden_bound(&b, Horizon::Steps(t + 1 + (bump * 10.0) as u64)).unwrap(),
                hidden_bound(&StabilityBudget { lambda: (b.lambda + bump * (0.999 - b.lambda)), ..b }, Horizon::Steps(t)).unwrap(),
                hidden_bound(&StabilityBudget { u_norm1: b.u_norm1 + bump, ..b }, Horizon::Steps(t)).unwrap(),
                hidden_bound(&StabilityBudget { x_sup: b.x_sup + bump, ..b }, Horizon::Steps(t)).unwrap(),
                hidden_bound(&StabilityBudget { h0_inf: b.h0_inf + bump, ..b }, Horizon::Steps(t)).unwrap(),
            ];
            for v in variants {
                assert!(v >= base * (1.0 - 1e-15), "{v} < {base}");
            }
        }
    }

    #[test]
    fn simulation_never_exceeds_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let (m, d) = (rng.gen_range(1..8), rng.gen_range(1..8));
            let decay: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..0.99)).collect();
            let u = Tensor::randn(&[m, d], 1.0, &mut rng);
            let x_sup = rng.gen_range(0.1..3.0);
            let h0: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = rng.gen_range(1..100u64);
            let b = budget(
                1e300,
                decay.iter().copied().fold(0.0, f64::max),
                u_norm1(&u).unwrap(),
                x_sup,
                h0.iter().map(|v: &f64| v.abs()).fold(0.0, f64::max),
            );
            // random bounded inputs, not only the adversarial ones
            let mut h = h0.clone();
            for _ in 0..t {
                let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-x_sup..=x_sup)).collect();
                for i in 0..m {
                    let drive: f64 = u.data()[i * d..(i + 1) * d].iter().zip(&x).map(|(a, b)| a * b).sum();
                    h[i] = decay[i] * h[i] + drive;
                }
            }
            let bound = hidden_bound(&b, Horizon::Steps(t)).unwrap();
            assert!(h.iter().all(|v| v.abs() <= bound * (1.0 + 1e-12)));
            assert!(adversarial_simulation(&decay, &u, x_sup, &h0, t).unwrap() <= bound * (1.0 + 1e-12));
        }
    }

    #[test]
    fn u_norm_scales_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = 16;
        while m <= 1024 {
            let u = Tensor::randn(&[m, m], 1.0, &mut rng);
            let ratio = u_norm1(&u).unwrap() / m as f64;
            // E|N(0,1)| = sqrt(2/π) ≈ 0.80
            assert!(ratio > 0.4 && ratio < 1.6, "m={m}: {ratio}");
            m *= 2;
        }
    }

    #[test]
    fn monitor_flags() {
        let mon = OverflowMonitor::new(Precision::F32);
        let ev = mon.observe(5, &[1.0, 3.2e38, f64::NAN], &[0.9, 0.99, 0.5]);
        assert_eq!(ev.len(), 2);
        assert_eq!((ev[0].layer, ev[0].kind, ev[0].step), (1, MonitorKind::NearLimit, 5));
        assert_eq!(ev[1].kind, MonitorKind::NonFinite);
        assert!(OverflowMonitor::new(Precision::F64).observe(0, &[3.2e38], &[0.9]).is_empty());
    }
}
