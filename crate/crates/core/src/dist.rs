//! Finite return distributions represented as Dirac mixtures.
//!
//! Every value distribution in this crate is a finite list of
//! `(value, probability)` atoms, sorted strictly ascending by value with
//! probabilities summing to one. That representation is closed under the
//! three operations the Bellman-style operators need — affine maps,
//! independent sums (convolution), and probability mixtures — so all
//! dynamic programming in [`crate::operators`] is exact.

use std::collections::BTreeMap;

use rand::Rng;
use thiserror::Error;

/// Absolute value tolerance below which two atoms are merged during
/// normalization. Repeated convolutions otherwise accumulate
/// float-duplicated support points.
pub const MERGE_EPS: f64 = 1e-9;

/// Tolerance on the total probability mass of a normalized distribution.
pub const MASS_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("atom value must be finite, got {0}")]
    NonFiniteValue(f64),
    #[error("atom probability must be finite and non-negative, got {0}")]
    InvalidProbability(f64),
    #[error("total probability mass must be positive")]
    ZeroMass,
    #[error("scale must be non-negative and finite, got {0}")]
    InvalidScale(f64),
    #[error("shift must be finite, got {0}")]
    InvalidShift(f64),
    #[error("quantile fraction must lie in (0,1), got {0}")]
    InvalidFraction(f64),
    #[error("mixture weights must sum to 1 (got {0})")]
    WeightSum(f64),
    #[error("mixture weight must lie in [0,1], got {0}")]
    InvalidWeight(f64),
    #[error("Wasserstein order must satisfy p >= 1, got {0}")]
    InvalidOrder(f64),
    #[error("keyed maps must share an identical key set (missing: {0})")]
    KeyMismatch(String),
    #[error("prune requires max_atoms >= 2, got {0}")]
    InvalidPruneSize(usize),
}

/// A single point mass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub value: f64,
    pub prob: f64,
}

/// A finite Dirac mixture over real returns.
///
/// Invariants (enforced by every constructor):
/// - atoms sorted strictly ascending by value, values within [`MERGE_EPS`]
///   merged,
/// - every probability strictly positive, total mass within [`MASS_EPS`]
///   of one,
/// - every value finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnDistribution {
    atoms: Vec<Atom>,
}

impl ReturnDistribution {
    /// Point mass at `v`.
    pub fn dirac(v: f64) -> Result<Self, DistError> {
        if !v.is_finite() {
            return Err(DistError::NonFiniteValue(v));
        }
        Ok(Self {
            atoms: vec![Atom { value: v, prob: 1.0 }],
        })
    }

    /// Normalizes a raw atom list: drops zero-mass atoms, sorts, merges
    /// values within [`MERGE_EPS`] (probability-weighted), and rescales the
    /// mass to one. Idempotent.
    pub fn from_atoms(raw: impl IntoIterator<Item = (f64, f64)>) -> Result<Self, DistError> {
        let mut atoms: Vec<Atom> = Vec::new();
        for (value, prob) in raw {
            if !value.is_finite() {
                return Err(DistError::NonFiniteValue(value));
            }
            if !prob.is_finite() || prob < 0.0 {
                return Err(DistError::InvalidProbability(prob));
            }
            if prob > 0.0 {
                atoms.push(Atom { value, prob });
            }
        }
        if atoms.is_empty() {
            return Err(DistError::ZeroMass);
        }
        atoms.sort_by(|a, b| a.value.total_cmp(&b.value));

        let mut merged: Vec<Atom> = Vec::with_capacity(atoms.len());
        for atom in atoms {
            match merged.last_mut() {
                Some(last) if atom.value - last.value <= MERGE_EPS => {
                    let mass = last.prob + atom.prob;
                    if atom.value != last.value {
                        last.value = (last.value * last.prob + atom.value * atom.prob) / mass;
                    }
                    last.prob = mass;
                }
                _ => merged.push(atom),
            }
        }
        let total: f64 = merged.iter().map(|a| a.prob).sum();
        if total <= 0.0 {
            return Err(DistError::ZeroMass);
        }
        for atom in &mut merged {
            atom.prob /= total;
        }
        Ok(Self { atoms: merged })
    }

    /// Equal-weight empirical distribution over observed samples.
    pub fn from_samples(samples: &[f64]) -> Result<Self, DistError> {
        let w = 1.0 / samples.len() as f64;
        Self::from_atoms(samples.iter().map(|&v| (v, w)))
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|a| a.value * a.prob).sum()
    }

    pub fn min_value(&self) -> f64 {
        self.atoms[0].value
    }

    pub fn max_value(&self) -> f64 {
        self.atoms[self.atoms.len() - 1].value
    }

    /// Distribution of `scale * X + shift`. A zero scale collapses to a
    /// point mass at `shift` (the γ = 0 edge case).
    pub fn affine(&self, scale: f64, shift: f64) -> Result<Self, DistError> {
        if !scale.is_finite() || scale < 0.0 {
            return Err(DistError::InvalidScale(scale));
        }
        if !shift.is_finite() {
            return Err(DistError::InvalidShift(shift));
        }
        if scale == 0.0 {
            return Self::dirac(shift);
        }
        Self::from_atoms(self.atoms.iter().map(|a| (scale * a.value + shift, a.prob)))
    }

    /// Distribution of `X + Y` for independent `X ~ self`, `Y ~ other`.
    pub fn convolve(&self, other: &Self) -> Self {
        let mut raw = Vec::with_capacity(self.atoms.len() * other.atoms.len());
        for a in &self.atoms {
            for b in &other.atoms {
                raw.push((a.value + b.value, a.prob * b.prob));
            }
        }
        // Inputs are valid distributions, so the product list cannot fail.
        Self::from_atoms(raw).expect("convolution of valid distributions")
    }

    /// Probability-weighted mixture. Weights must sum to one within
    /// [`MASS_EPS`].
    pub fn mix(parts: &[(f64, &Self)]) -> Result<Self, DistError> {
        let mut total = 0.0;
        for &(w, _) in parts {
            if !w.is_finite() || !(0.0..=1.0).contains(&w) {
                return Err(DistError::InvalidWeight(w));
            }
            total += w;
        }
        if (total - 1.0).abs() > MASS_EPS {
            return Err(DistError::WeightSum(total));
        }
        let mut raw = Vec::new();
        for &(w, d) in parts {
            if w == 0.0 {
                continue;
            }
            raw.extend(d.atoms.iter().map(|a| (a.value, w * a.prob)));
        }
        Self::from_atoms(raw)
    }

    /// Generalized inverse CDF: the smallest value whose CDF weakly exceeds
    /// `u`. A small mass tolerance keeps cumulative-rounding from skipping
    /// an atom whose exact cumulative probability equals `u`.
    pub fn quantile(&self, u: f64) -> Result<f64, DistError> {
        if !(u > 0.0 && u < 1.0) {
            return Err(DistError::InvalidFraction(u));
        }
        let mut cum = 0.0;
        for a in &self.atoms {
            cum += a.prob;
            if cum >= u - MASS_EPS {
                return Ok(a.value);
            }
        }
        Ok(self.max_value())
    }

    /// `P(X <= x)`.
    pub fn cdf(&self, x: f64) -> f64 {
        self.atoms
            .iter()
            .take_while(|a| a.value <= x)
            .map(|a| a.prob)
            .sum()
    }

    /// Inverse-CDF sampling.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut cum = 0.0;
        for a in &self.atoms {
            cum += a.prob;
            if u < cum {
                return a.value;
            }
        }
        self.max_value()
    }

    /// Projects onto `max_atoms` equally weighted quantile midpoints when
    /// the support is larger, returning the projection together with its
    /// exact 1-Wasserstein distance from `self` (a bound on the mean
    /// shift). A no-op (distance 0) when the support already fits.
    pub fn prune(&self, max_atoms: usize) -> Result<(Self, f64), DistError> {
        if max_atoms < 2 {
            return Err(DistError::InvalidPruneSize(max_atoms));
        }
        if self.atoms.len() <= max_atoms {
            return Ok((self.clone(), 0.0));
        }
        let n = max_atoms as f64;
        let w = 1.0 / n;
        let mut raw = Vec::with_capacity(max_atoms);
        for i in 0..max_atoms {
            let tau = (2 * i + 1) as f64 / (2.0 * n);
            raw.push((self.quantile(tau)?, w));
        }
        let pruned = Self::from_atoms(raw)?;
        let err = wasserstein(self, &pruned, 1.0)?;
        Ok((pruned, err))
    }

    /// Compact display form, e.g. `{-10:0.1, 100:0.9}`.
    pub fn display_compact(&self) -> String {
        let body: Vec<String> = self
            .atoms
            .iter()
            .map(|a| format!("{}:{}", trim_float(a.value), trim_float(a.prob)))
            .collect();
        format!("{{{}}}", body.join(", "))
    }
}

fn trim_float(x: f64) -> String {
    if x == x.trunc() && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// Exact p-Wasserstein distance between two finite mixtures: the L_p
/// distance between quantile functions, integrated piecewise over the
/// union of cumulative-probability breakpoints.
pub fn wasserstein(d1: &ReturnDistribution, d2: &ReturnDistribution, p: f64) -> Result<f64, DistError> {
    if !p.is_finite() || p < 1.0 {
        return Err(DistError::InvalidOrder(p));
    }
    let a = d1.atoms();
    let b = d2.atoms();
    let (mut i, mut j) = (0usize, 0usize);
    let (mut cum_a, mut cum_b) = (a[0].prob, b[0].prob);
    let mut prev = 0.0f64;
    let mut acc = 0.0f64;
    loop {
        let level = cum_a.min(cum_b).min(1.0);
        let seg = level - prev;
        if seg > 0.0 {
            let diff = (a[i].value - b[j].value).abs();
            acc += if p == 1.0 { diff } else { diff.powf(p) } * seg;
        }
        prev = level;
        if prev >= 1.0 - MASS_EPS {
            break;
        }
        if cum_a <= cum_b {
            i = (i + 1).min(a.len() - 1);
            cum_a += a.get(i).map_or(0.0, |at| at.prob);
        } else {
            j = (j + 1).min(b.len() - 1);
            cum_b += b.get(j).map_or(0.0, |at| at.prob);
        }
    }
    Ok(if p == 1.0 { acc } else { acc.powf(1.0 / p) })
}

/// An associative collection of return distributions under opaque string
/// keys (state-action or history-action encodings). Iteration order is
/// deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyedDistributionMap {
    entries: BTreeMap<String, ReturnDistribution>,
}

impl KeyedDistributionMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, dist: ReturnDistribution) {
        self.entries.insert(key.into(), dist);
    }

    pub fn get(&self, key: &str) -> Option<&ReturnDistribution> {
        self.entries.get(key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ReturnDistribution)> {
        self.entries.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }
}

/// Supremum of per-key Wasserstein distances over a shared key set.
pub fn max_wasserstein(
    m1: &KeyedDistributionMap,
    m2: &KeyedDistributionMap,
    p: f64,
) -> Result<f64, DistError> {
    for k in m1.keys() {
        if m2.get(k).is_none() {
            return Err(DistError::KeyMismatch(k.clone()));
        }
    }
    for k in m2.keys() {
        if m1.get(k).is_none() {
            return Err(DistError::KeyMismatch(k.clone()));
        }
    }
    let mut sup = 0.0f64;
    for (k, d1) in m1.iter() {
        let d2 = m2.get(k).expect("checked key");
        sup = sup.max(wasserstein(d1, d2, p)?);
    }
    Ok(sup)
}
