//! Exact conditional entropies of first-order Markov sources.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cap on `states^(k_max + 1)` for brute-force enumeration.
pub const ENUMERATION_LIMIT: u64 = 10_000_000;

/// Markov chain whose states are the emitted tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovLanguageSpec {
    pub states: usize,
    /// Row-major `states × states`, rows sum to 1.
    pub transition: Vec<f64>,
    pub initial: Vec<f64>,
}

fn plogp_sum(p: impl IntoIterator<Item = f64>) -> f64 {
    -p.into_iter().filter(|&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

impl MarkovLanguageSpec {
    pub fn new(states: usize, transition: Vec<f64>, initial: Vec<f64>) -> Result<Self> {
        let s = Self {
            states,
            transition,
            initial,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.states;
        if n == 0 || self.transition.len() != n * n || self.initial.len() != n {
            return Err(Error::invalid(format!(
                "markov spec with {n} states needs {} transition and {n} initial entries",
                n * n
            )));
        }
        let check = |row: &[f64], what: &str| -> Result<()> {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::invalid(format!("{what} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("{what} sums to {sum}, not 1")));
            }
            Ok(())
        };
        for i in 0..n {
            check(&self.transition[i * n..(i + 1) * n], &format!("transition row {i}"))?;
        }
        check(&self.initial, "initial distribution")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.transition[i * self.states..(i + 1) * self.states]
    }

    /// I.i.d. uniform over `n` symbols.
    pub fn iid_uniform(n: usize) -> Self {
        let p = 1.0 / n as f64;
        Self {
            states: n,
            transition: vec![p; n * n],
            initial: vec![p; n],
        }
    }

    /// `0 → 1 → … → n-1 → 0`, uniform start.
    pub fn cycle(n: usize) -> Self {
        let mut transition = vec![0.0; n * n];
        for i in 0..n {
            transition[i * n + (i + 1) % n] = 1.0;
        }
        Self {
            states: n,
            transition,
            initial: vec![1.0 / n as f64; n],
        }
    }

    /// Two states that repeat with probability `stay`, stationary start.
    pub fn symmetric_two_state(stay: f64) -> Result<Self> {
        Self::new(2, vec![stay, 1.0 - stay, 1.0 - stay, stay], vec![0.5, 0.5])
    }

    /// `n`-state chain, each row drawn from a symmetric Dirichlet(`concentration`);
    /// stationary start.
    pub fn random<R: Rng + ?Sized>(n: usize, concentration: f64, rng: &mut R) -> Result<Self> {
        let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
        let mut transition = Vec::with_capacity(n * n);
        for _ in 0..n {
            let row: Vec<f64> = (0..n).map(|_| gamma.sample(rng).max(1e-12)).collect();
            let sum: f64 = row.iter().sum();
            transition.extend(row.iter().map(|x| x / sum));
        }
        let mut spec = Self {
            states: n,
            transition,
            initial: vec![1.0 / n as f64; n],
        };
        spec.initial = spec.stationary();
        let sum: f64 = spec.initial.iter().sum();
        spec.initial.iter_mut().for_each(|p| *p /= sum);
        spec.validate()?;
        Ok(spec)
    }

    /// `P(X_{k+1} = ·)` for `k ≥ 0`.
    pub fn marginal(&self, k: usize) -> Vec<f64> {
        let mut p = self.initial.clone();
        for _ in 0..k {
            p = self.step(&p);
        }
        p
    }

    fn step(&self, p: &[f64]) -> Vec<f64> {
        let n = self.states;
        let mut q = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                q[j] += p[i] * self.transition[i * n + j];
            }
        }
        q
    }

    /// Stationary distribution by power iteration on the lazy chain.
    pub fn stationary(&self) -> Vec<f64> {
        let mut p = vec![1.0 / self.states as f64; self.states];
        for _ in 0..100_000 {
            let q = self.step(&p);
            let next: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
            let diff = next.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            p = next;
            if diff < 1e-16 {
                break;
            }
        }
        p
    }

    /// Per-row entropies `H(X' | X = i)`.
    pub fn row_entropies(&self) -> Vec<f64> {
        (0..self.states).map(|i| plogp_sum(self.row(i).iter().copied())).collect()
    }

    /// Mean NLL per token that an exact model attains on a window of `len`
    /// tokens drawn from the initial distribution.
    pub fn window_entropy_rate(&self, len: usize) -> Result<f64> {
        if len == 0 {
            return Err(Error::invalid("window length must be positive"));
        }
        let total: f64 = (0..len).map(|k| markov_conditional_entropy(self, k)).sum::<Result<f64>>()?;
        Ok(total / len as f64)
    }
}

/// `H(X_{k+1} | X_1, …, X_k)` in nats. For `k ≥ 1` this is
/// `Σ_i P(X_k = i) H(X' | X = i)`; for `k = 0` it is `H(X_1)`.
pub fn markov_conditional_entropy(spec: &MarkovLanguageSpec, k: usize) -> Result<f64> {
    spec.validate()?;
    if k == 0 {
        return Ok(plogp_sum(spec.initial.iter().copied()));
    }
    let p = spec.marginal(k - 1);
    Ok(p.iter().zip(spec.row_entropies()).map(|(pi, h)| pi * h).sum())
}

/// Probability of every sequence of length `len`, indexed in base `states`
/// with `X_1` as the most significant digit.
pub fn joint_distribution(spec: &MarkovLanguageSpec, len: usize) -> Result<Vec<f64>> {
    spec.validate()?;
    let n = spec.states;
    let terms = (n as u64).checked_pow(len as u32).unwrap_or(u64::MAX);
    if terms > ENUMERATION_LIMIT {
        return Err(Error::invalid(format!(
            "enumerating {n}^{len} sequences exceeds the limit of {ENUMERATION_LIMIT}"
        )));
    }
    let mut p = spec.initial.clone();
    for _ in 1..len {
        let mut next = vec![0.0; p.len() * n];
        for (idx, &pi) in p.iter().enumerate() {
            let last = idx % n;
            for j in 0..n {
                next[idx * n + j] = pi * spec.transition[last * n + j];
            }
        }
        p = next;
    }
    Ok(p)
}

/// Entropy of the last `keep` coordinates of a joint over `len` symbols.
fn suffix_entropy(joint: &[f64], n: usize, keep: usize) -> f64 {
    if keep == 0 {
        return 0.0;
    }
    let size = n.pow(keep as u32);
    let mut marg = vec![0.0; size];
    for (idx, &p) in joint.iter().enumerate() {
        marg[idx % size] += p;
    }
    plogp_sum(marg)
}

/// `H(X_{k+1} | X_i, …, X_k)` for `i = 1..=k+1` (the last entry conditions on
/// nothing), by joint enumeration of `X_1..X_{k+1}`.
pub fn brute_force_suffix_entropies(spec: &MarkovLanguageSpec, k: usize) -> Result<Vec<f64>> {
    let joint = joint_distribution(spec, k + 1)?;
    let n = spec.states;
    Ok((1..=k + 1)
        .map(|i| {
            let keep = k + 2 - i;
            suffix_entropy(&joint, n, keep) - suffix_entropy(&joint, n, keep - 1)
        })
        .collect())
}

/// `H(X_{k+1} | X_1, …, X_k)` by enumeration.
pub fn brute_force_conditional_entropy(spec: &MarkovLanguageSpec, k: usize) -> Result<f64> {
    Ok(brute_force_suffix_entropies(spec, k)?[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityRow {
    pub k: usize,
    /// `H(X_{k+1} | X_i..X_k)` for `i = 1..=k+1`.
    pub suffix_entropies: Vec<f64>,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityVerdict {
    pub rows: Vec<MonotonicityRow>,
    pub tolerance: f64,
    pub pass: bool,
}

/// Checks `H(X_{k+1}|X_1..X_k) ≤ H(X_{k+1}|X_2..X_k) ≤ … ≤ H(X_{k+1}|X_k) ≤ H(X_{k+1})`
/// for every `k ≤ k_max`.
pub fn entropy_monotonicity_check(spec: &MarkovLanguageSpec, k_max: usize, tolerance: f64) -> Result<MonotonicityVerdict> {
    if k_max < 2 {
        return Err(Error::invalid("k_max must be at least 2"));
    }
    let terms = (spec.states as u64).checked_pow(k_max as u32 + 1).unwrap_or(u64::MAX);
    if terms > ENUMERATION_LIMIT {
        return Err(Error::invalid(format!(
            "{}^{} terms exceeds the enumeration limit of {ENUMERATION_LIMIT}",
            spec.states,
            k_max + 1
        )));
    }
    let mut rows = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let h = brute_force_suffix_entropies(spec, k)?;
        let holds = h.windows(2).all(|w| w[0] <= w[1] + tolerance);
        rows.push(MonotonicityRow {
            k,
            suffix_entropies: h,
            holds,
        });
    }
    let pass = rows.iter().all(|r| r.holds);
    Ok(MonotonicityVerdict { rows, tolerance, pass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closed_form_examples() {
        let iid = MarkovLanguageSpec::iid_uniform(2);
        for k in 0..6 {
            assert!((markov_conditional_entropy(&iid, k).unwrap() - 2f64.ln()).abs() < 1e-15);
        }
        let cyc = MarkovLanguageSpec::cycle(3);
        for k in 1..6 {
            assert_eq!(markov_conditional_entropy(&cyc, k).unwrap(), 0.0);
        }
        let sym = MarkovLanguageSpec::symmetric_two_state(0.9).unwrap();
        let h = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        for k in 1..=10 {
            assert!((markov_conditional_entropy(&sym, k).unwrap() - h).abs() < 1e-12);
            assert!((brute_force_conditional_entropy(&sym, k).unwrap() - h).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(MarkovLanguageSpec::new(2, vec![0.5, 0.6, 0.5, 0.5], vec![0.5, 0.5]).is_err());
        assert!(MarkovLanguageSpec::new(2, vec![1.5, -0.5, 0.5, 0.5], vec![0.5, 0.5]).is_err());
        assert!(MarkovLanguageSpec::new(2, vec![0.5; 3], vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn enumeration_guard() {
        let spec = MarkovLanguageSpec::iid_uniform(10);
        assert!(entropy_monotonicity_check(&spec, 7, 1e-9).is_err());
        assert!(entropy_monotonicity_check(&spec, 1, 1e-9).is_err());
    }

    #[test]
    fn independent_source_has_equal_terms() {
        let v = entropy_monotonicity_check(&MarkovLanguageSpec::iid_uniform(3), 4, 1e-9).unwrap();
        assert!(v.pass);
        for r in &v.rows {
            for h in &r.suffix_entropies {
                assert!((h - 3f64.ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_chains_satisfy_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let spec = MarkovLanguageSpec::random(3, 0.7, &mut rng).unwrap();
            assert!(entropy_monotonicity_check(&spec, 5, 1e-9).unwrap().pass);
        }
    }

    #[test]
    fn window_rate_blends_first_symbol() {
        let sym = MarkovLanguageSpec::symmetric_two_state(0.9).unwrap();
        let h = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        let r = sym.window_entropy_rate(4).unwrap();
        assert!((r - (2f64.ln() + 3.0 * h) / 4.0).abs() < 1e-12);
    }
}
