//! Distortion risk measures and their exact evaluation on Dirac mixtures.
//!
//! A distortion risk measure reweights the quantile function of a
//! distribution: `β[X] = ∫₀¹ F_X⁻¹(g(τ)) dτ` for a continuous
//! non-decreasing fraction map `g : [0,1] → [0,1]`. On finite mixtures the
//! integral is a finite sum over the τ-intervals where `g` stays between
//! consecutive cumulative probabilities, so evaluation is exact.
//!
//! Implemented maps: identity (mean), `ητ` (CVaR), Gaussian translation
//! (Wang), the Tversky–Kahneman inverse-S curve (CPW), and the power
//! family (POW).

use rand::Rng;
use thiserror::Error;

use crate::dist::ReturnDistribution;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiskError {
    #[error("cvar level must lie in (0,1], got {0}")]
    InvalidCvarLevel(f64),
    #[error("{kind} parameter must be finite, got {eta}")]
    NonFiniteEta { kind: &'static str, eta: f64 },
    #[error("cpw fraction map is non-monotone for eta = {0} (requires eta > 0.28)")]
    NonMonotoneCpw(f64),
    #[error("fraction argument must lie in [0,1], got {0}")]
    InvalidFraction(f64),
    #[error("normal quantile requires p in (0,1), got {0}")]
    InvalidNormalFraction(f64),
    #[error("sampled evaluation requires a non-empty quantile list")]
    EmptyQuantiles,
    #[error("sampled evaluation requires at least one sample")]
    ZeroSamples,
    #[error("unknown risk measure spec '{0}' (expected e.g. mean, cvar:0.1, wang:-0.75, cpw:0.71, pow:-2)")]
    BadSpec(String),
}

/// A tagged distortion risk measure together with its parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RiskMeasure {
    /// Identity distortion; risk-neutral expectation.
    Mean,
    /// Conditional value-at-risk at level `eta ∈ (0,1]`: the mean of the
    /// worst `eta`-fraction of outcomes. `g(τ) = ητ`.
    Cvar { eta: f64 },
    /// Wang transform `g(τ) = Φ(Φ⁻¹(τ) + η)`; risk-averse for `η < 0`.
    Wang { eta: f64 },
    /// Cumulative probability weighting in the Tversky–Kahneman form
    /// `g(τ) = τ^η / (τ^η + (1−τ)^η)^{1/η}`; η = 0.71 fits human subjects.
    Cpw { eta: f64 },
    /// Power distortion: `τ^{1/(1+|η|)}` for `η ≥ 0` (risk-seeking),
    /// `1 − (1−τ)^{1/(1+|η|)}` for `η < 0` (risk-averse).
    Pow { eta: f64 },
}

impl RiskMeasure {
    pub fn mean() -> Self {
        RiskMeasure::Mean
    }

    pub fn cvar(eta: f64) -> Result<Self, RiskError> {
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(RiskError::InvalidCvarLevel(eta));
        }
        Ok(RiskMeasure::Cvar { eta })
    }

    pub fn wang(eta: f64) -> Result<Self, RiskError> {
        if !eta.is_finite() {
            return Err(RiskError::NonFiniteEta { kind: "wang", eta });
        }
        Ok(RiskMeasure::Wang { eta })
    }

    pub fn cpw(eta: f64) -> Result<Self, RiskError> {
        if !eta.is_finite() || eta <= 0.0 {
            return Err(RiskError::NonFiniteEta { kind: "cpw", eta });
        }
        let m = RiskMeasure::Cpw { eta };
        // The TK curve loses monotonicity for small eta; reject such
        // parameters so the fraction map stays a valid distortion.
        let mut prev = 0.0;
        for i in 1..=1000 {
            let g = m.fraction_map(i as f64 / 1000.0);
            if g + 1e-12 < prev {
                return Err(RiskError::NonMonotoneCpw(eta));
            }
            prev = g;
        }
        Ok(m)
    }

    pub fn pow(eta: f64) -> Result<Self, RiskError> {
        if !eta.is_finite() {
            return Err(RiskError::NonFiniteEta { kind: "pow", eta });
        }
        Ok(RiskMeasure::Pow { eta })
    }

    /// Parses a measure spec string: `mean`, `cvar:0.1`, `wang:-0.75`,
    /// `cpw:0.71`, `pow:-2.0`.
    pub fn parse(spec: &str) -> Result<Self, RiskError> {
        let spec = spec.trim();
        if spec.eq_ignore_ascii_case("mean") {
            return Ok(RiskMeasure::Mean);
        }
        let (kind, eta) = spec
            .split_once(':')
            .ok_or_else(|| RiskError::BadSpec(spec.to_string()))?;
        let eta: f64 = eta
            .trim()
            .parse()
            .map_err(|_| RiskError::BadSpec(spec.to_string()))?;
        match kind.trim().to_ascii_lowercase().as_str() {
            "cvar" => Self::cvar(eta),
            "wang" => Self::wang(eta),
            "cpw" => Self::cpw(eta),
            "pow" => Self::pow(eta),
            _ => Err(RiskError::BadSpec(spec.to_string())),
        }
    }

    /// Canonical spec string.
    pub fn name(&self) -> String {
        match self {
            RiskMeasure::Mean => "mean".to_string(),
            RiskMeasure::Cvar { eta } => format!("cvar:{eta}"),
            RiskMeasure::Wang { eta } => format!("wang:{eta}"),
            RiskMeasure::Cpw { eta } => format!("cpw:{eta}"),
            RiskMeasure::Pow { eta } => format!("pow:{eta}"),
        }
    }

    /// The fraction map `g(τ)`, clamped to `[0,1]`.
    pub fn fraction_map(&self, tau: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&tau));
        let g = match *self {
            RiskMeasure::Mean => tau,
            RiskMeasure::Cvar { eta } => eta * tau,
            RiskMeasure::Wang { eta } => {
                if tau <= 0.0 {
                    0.0
                } else if tau >= 1.0 {
                    1.0
                } else {
                    normal_cdf(normal_quantile_unchecked(tau) + eta)
                }
            }
            RiskMeasure::Cpw { eta } => {
                if tau <= 0.0 {
                    0.0
                } else if tau >= 1.0 {
                    1.0
                } else {
                    let tn = tau.powf(eta);
                    let cn = (1.0 - tau).powf(eta);
                    tn / (tn + cn).powf(1.0 / eta)
                }
            }
            RiskMeasure::Pow { eta } => {
                let e = 1.0 / (1.0 + eta.abs());
                if eta >= 0.0 {
                    tau.powf(e)
                } else {
                    1.0 - (1.0 - tau).powf(e)
                }
            }
        };
        g.clamp(0.0, 1.0)
    }

    /// Largest `τ` with `g(τ) <= c`; closed form everywhere except CPW,
    /// which falls back to bisection at 1e-12.
    fn fraction_map_inverse(&self, c: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&c));
        match *self {
            RiskMeasure::Mean => c,
            RiskMeasure::Cvar { eta } => (c / eta).min(1.0),
            RiskMeasure::Wang { eta } => {
                if c <= 0.0 {
                    0.0
                } else if c >= 1.0 {
                    1.0
                } else {
                    normal_cdf(normal_quantile_unchecked(c) - eta)
                }
            }
            RiskMeasure::Pow { eta } => {
                let e = 1.0 + eta.abs();
                if eta >= 0.0 {
                    c.powf(e)
                } else {
                    1.0 - (1.0 - c).powf(e)
                }
            }
            RiskMeasure::Cpw { .. } => {
                if c <= 0.0 {
                    return 0.0;
                }
                if c >= 1.0 {
                    return 1.0;
                }
                let (mut lo, mut hi) = (0.0f64, 1.0f64);
                while hi - lo > 1e-12 {
                    let mid = 0.5 * (lo + hi);
                    if self.fraction_map(mid) <= c {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            }
        }
    }

    /// Exact distorted expectation `∫₀¹ F⁻¹(g(τ)) dτ` of a finite mixture.
    ///
    /// The unit interval is partitioned at the τ-breakpoints where `g`
    /// crosses the cumulative probabilities of the atoms; each piece
    /// contributes `value × length`.
    pub fn evaluate(&self, d: &ReturnDistribution) -> f64 {
        let mut acc = 0.0;
        let mut cum = 0.0;
        let mut prev_tau = 0.0;
        for (i, atom) in d.atoms().iter().enumerate() {
            cum += atom.prob;
            let tau = if i + 1 == d.len() {
                1.0
            } else {
                self.fraction_map_inverse(cum.min(1.0)).clamp(prev_tau, 1.0)
            };
            acc += atom.value * (tau - prev_tau);
            prev_tau = tau;
        }
        acc
    }

    /// Sampled estimator over a sorted array of `N` equally weighted
    /// quantile values: averages `values[floor(g(τ_k)·N)]` over `K`
    /// fractions, taken on the deterministic midpoint grid or drawn
    /// uniformly.
    pub fn evaluate_sampled<R: Rng + ?Sized>(
        &self,
        quantile_values: &[f64],
        k_samples: usize,
        mode: SampleMode,
        rng: &mut R,
    ) -> Result<f64, RiskError> {
        if quantile_values.is_empty() {
            return Err(RiskError::EmptyQuantiles);
        }
        if k_samples == 0 {
            return Err(RiskError::ZeroSamples);
        }
        let n = quantile_values.len();
        let mut acc = 0.0;
        for k in 0..k_samples {
            let tau = match mode {
                SampleMode::Deterministic => (2 * k + 1) as f64 / (2 * k_samples) as f64,
                SampleMode::Stochastic => rng.random::<f64>(),
            };
            let u = self.fraction_map(tau);
            let idx = ((u * n as f64) as usize).min(n - 1);
            acc += quantile_values[idx];
        }
        Ok(acc / k_samples as f64)
    }
}

/// Fraction-sampling strategy for [`RiskMeasure::evaluate_sampled`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Midpoint grid `(2k+1)/2K`; reproducible.
    Deterministic,
    /// Uniform draws.
    Stochastic,
}

/// Error function, accurate to ~1e-15: Taylor series on `|x| <= 2`,
/// a Lentz continued fraction for the tail.
pub fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x <= 2.0 {
        erf_series(x)
    } else {
        1.0 - erfc_cf(x)
    }
}

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x <= 2.0 {
        1.0 - erf_series(x)
    } else {
        erfc_cf(x)
    }
}

fn erf_series(x: f64) -> f64 {
    // erf(x) = 2/sqrt(pi) * sum over n of (-1)^n x^(2n+1) / (n! (2n+1))
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 1.0;
    loop {
        term *= -x2 / n;
        let contrib = term / (2.0 * n + 1.0);
        sum += contrib;
        if contrib.abs() < 1e-18 * sum.abs() + 1e-300 {
            break;
        }
        n += 1.0;
    }
    sum * std::f64::consts::FRAC_2_SQRT_PI
}

fn erfc_cf(x: f64) -> f64 {
    // sqrt(pi) e^{x^2} erfc(x) = 1/(x+ (1/2)/(x+ (2/2)/(x+ (3/2)/(x+ ...))))
    // evaluated by the modified Lentz method.
    const TINY: f64 = 1e-300;
    let mut f = TINY;
    let mut c = f;
    let mut d = 0.0;
    for k in 0..200 {
        let (a, b) = if k == 0 { (1.0, x) } else { (k as f64 / 2.0, x) };
        d = b + a * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-17 {
            break;
        }
    }
    (-x * x).exp() / std::f64::consts::PI.sqrt() * f
}

/// Standard normal CDF `Φ(x)`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal quantile `Φ⁻¹(p)`: Acklam's rational approximation
/// refined by one Newton step on [`normal_cdf`].
pub fn normal_quantile(p: f64) -> Result<f64, RiskError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(RiskError::InvalidNormalFraction(p));
    }
    Ok(normal_quantile_unchecked(p))
}

fn normal_quantile_unchecked(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    // One Newton refinement against the high-precision CDF.
    let err = normal_cdf(x) - p;
    let pdf = normal_pdf(x);
    if pdf > 1e-280 {
        x - err / pdf
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::ReturnDistribution;

    fn dist(atoms: &[(f64, f64)]) -> ReturnDistribution {
        ReturnDistribution::from_atoms(atoms.iter().copied()).unwrap()
    }

    #[test]
    fn fraction_map_examples() {
        let cvar = RiskMeasure::cvar(0.1).unwrap();
        assert!((cvar.fraction_map(0.5) - 0.05).abs() < 1e-15);
        for tau in [0.0, 0.25, 0.5, 0.75, 1.0] {
            assert_eq!(RiskMeasure::Mean.fraction_map(tau), tau);
            let w0 = RiskMeasure::wang(0.0).unwrap().fraction_map(tau);
            assert!((w0 - tau).abs() < 1e-12);
        }
    }

    #[test]
    fn cvar_level_validation() {
        assert!(RiskMeasure::cvar(0.0).is_err());
        assert!(RiskMeasure::cvar(1.5).is_err());
        assert!(RiskMeasure::cvar(1.0).is_ok());
    }

    #[test]
    fn cpw_rejects_non_monotone_eta() {
        assert!(RiskMeasure::cpw(0.71).is_ok());
        assert!(RiskMeasure::cpw(0.2).is_err());
        assert!(RiskMeasure::cpw(-0.5).is_err());
    }

    #[test]
    fn evaluate_worked_entries() {
        let cvar = RiskMeasure::cvar(0.1).unwrap();
        let two = dist(&[(-10.0, 0.1), (100.0, 0.9)]);
        assert!((cvar.evaluate(&two) - -10.0).abs() < 1e-12);

        // mean of the worst tenth: (0.01·(-20) + 0.09·90) / 0.1
        let three = dist(&[(-20.0, 0.01), (90.0, 0.18), (200.0, 0.81)]);
        assert!((cvar.evaluate(&three) - 79.0).abs() < 1e-12);

        assert!((RiskMeasure::Mean.evaluate(&two) - 89.0).abs() < 1e-12);

        let d = dist(&[(-15.0, 0.1), (95.0, 0.9)]);
        assert!((cvar.evaluate(&d) - -15.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_dirac_is_identity_for_every_kind() {
        let c = ReturnDistribution::dirac(-5.0).unwrap();
        let measures = [
            RiskMeasure::Mean,
            RiskMeasure::cvar(0.1).unwrap(),
            RiskMeasure::cvar(1.0).unwrap(),
            RiskMeasure::wang(-0.75).unwrap(),
            RiskMeasure::wang(0.75).unwrap(),
            RiskMeasure::cpw(0.71).unwrap(),
            RiskMeasure::pow(-2.0).unwrap(),
            RiskMeasure::pow(2.0).unwrap(),
        ];
        for m in measures {
            assert!((m.evaluate(&c) - -5.0).abs() < 1e-12, "{}", m.name());
        }
    }

    #[test]
    fn cvar_at_one_is_mean() {
        let d = dist(&[(-20.0, 0.01), (90.0, 0.18), (200.0, 0.81)]);
        let full = RiskMeasure::cvar(1.0).unwrap();
        assert!((full.evaluate(&d) - d.mean()).abs() < 1e-12);
    }

    #[test]
    fn wang_breakpoint_arithmetic() {
        // g(tau) <= 0.5 iff tau <= Phi(0.75) for eta = -0.75
        let m = RiskMeasure::wang(-0.75).unwrap();
        let d = dist(&[(0.0, 0.5), (10.0, 0.5)]);
        let expected = 10.0 * (1.0 - normal_cdf(0.75));
        assert!((m.evaluate(&d) - expected).abs() < 1e-10);
    }

    #[test]
    fn evaluate_sampled_examples() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);

        let single = RiskMeasure::Mean
            .evaluate_sampled(&[4.0], 100, SampleMode::Deterministic, &mut rng)
            .unwrap();
        assert_eq!(single, 4.0);

        let vs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let full = RiskMeasure::cvar(1.0).unwrap();
        let est = full
            .evaluate_sampled(&vs, 10_000, SampleMode::Deterministic, &mut rng)
            .unwrap();
        assert!((est - 4.5).abs() < 1e-9);

        let err = RiskMeasure::Mean.evaluate_sampled(&[], 10, SampleMode::Deterministic, &mut rng);
        assert!(err.is_err());
    }

    #[test]
    fn normal_function_reference_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.959964) - 0.975).abs() < 1e-6);
        assert!((normal_cdf(1.0) - 0.841344746068543).abs() < 1e-12);
        assert!((normal_cdf(2.0) - 0.977249868051821).abs() < 1e-12);
        assert!((normal_cdf(3.0) - 0.998650101968370).abs() < 1e-12);
        assert!((normal_cdf(-1.0) - (1.0 - 0.841344746068543)).abs() < 1e-12);

        assert!(normal_quantile(0.5).unwrap().abs() < 1e-12);
        assert!((normal_quantile(0.975).unwrap() - 1.959963984540054).abs() < 1e-9);
        assert!(normal_quantile(0.0).is_err());
        assert!(normal_quantile(1.0).is_err());

        for &p in &[1e-6, 0.01, 0.3, 0.5, 0.9, 0.999999] {
            let x = normal_quantile(p).unwrap();
            assert!((normal_cdf(x) - p).abs() < 1e-8, "p={p}");
        }
    }

    #[test]
    fn parse_roundtrip() {
        for spec in ["mean", "cvar:0.1", "wang:-0.75", "cpw:0.71", "pow:-2"] {
            let m = RiskMeasure::parse(spec).unwrap();
            assert_eq!(RiskMeasure::parse(&m.name()).unwrap(), m);
        }
        assert!(RiskMeasure::parse("cvar:1.5").is_err());
        assert!(RiskMeasure::parse("quantilish:0.3").is_err());
        assert!(RiskMeasure::parse("cvar").is_err());
    }
}
