//! Normal distribution helpers and the Fligner–Killeen variance test.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("need at least {needed} groups, got {got}")]
    TooFewGroups { needed: usize, got: usize },
    #[error("group {0} has fewer than 2 observations")]
    SmallGroup(usize),
    #[error("all absolute deviations are tied; the score variance is zero")]
    Degenerate,
    #[error("non-finite observation")]
    NonFinite,
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Upper tail `Q(x) = 1 - Φ(x)` for `x >= 0` (Hart's rational approximation,
/// double precision on the central range, continued fraction beyond 7.07).
fn upper_tail(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x > 37.0 {
        return 0.0;
    }
    let e = (-0.5 * x * x).exp();
    if x < 7.071_067_811_865_47 {
        let num = ((((((0.035_262_496_599_891_1 * x + 0.700_383_064_443_688) * x + 6.373_962_203_531_65) * x
            + 33.912_866_078_383)
            * x
            + 112.079_291_497_871)
            * x
            + 221.213_596_169_931)
            * x
            + 220.206_867_912_376)
            * e;
        let den = ((((((0.088_388_347_648_318_4 * x + 1.755_667_163_182_64) * x + 16.064_177_579_207) * x
            + 86.780_732_202_946_1)
            * x
            + 296.564_248_779_674)
            * x
            + 637.333_633_378_831)
            * x
            + 793.826_512_519_948)
            * x
            + 440.413_735_824_752;
        num / den
    } else {
        let mut b = x + 0.65;
        b = x + 4.0 / b;
        b = x + 3.0 / b;
        b = x + 2.0 / b;
        b = x + 1.0 / b;
        e / b / 2.506_628_274_631
    }
}

/// Standard normal CDF `Φ(z)`.
///
/// The lower tail is computed once for `|z|` and reflected, so
/// `Φ(z) + Φ(-z) == 1` holds exactly. Saturates to 0/1 beyond |z| = 37.
pub fn normal_cdf(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    let q = upper_tail(z.abs());
    if z > 0.0 {
        1.0 - q
    } else {
        q
    }
}

/// Standard normal quantile `Φ⁻¹(p)`.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Survival function of the chi-square distribution.
pub fn chi_square_sf(x: f64, dof: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let dist = ChiSquared::new(dof).expect("positive degrees of freedom");
    dist.sf(x)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Standard deviation with `n - ddof` in the denominator.
pub fn std_dev(values: &[f64], ddof: usize) -> f64 {
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - ddof) as f64).sqrt()
}

pub fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Quantile by inverting the empirical CDF: the smallest sample value `x`
/// with `F̂(x) >= p`. Input must be sorted ascending.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let k = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Fligner–Killeen test of equal variances (median-centred).
///
/// Observations are centred on their group median, the pooled absolute
/// deviations are ranked, and each rank `r` is scored as
/// `Φ⁻¹(1/2 + r / (2(N+1)))`. The statistic
/// `Σ n_g (ā_g − ā)² / V`, with `V` the sample variance of all scores, is
/// referred to chi-square with `k − 1` degrees of freedom.
pub fn fligner_killeen(groups: &[Vec<f64>]) -> Result<VarianceTest, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::TooFewGroups {
            needed: 2,
            got: groups.len(),
        });
    }
    for (i, g) in groups.iter().enumerate() {
        if g.len() < 2 {
            return Err(StatsError::SmallGroup(i));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite);
        }
    }
    let mut deviations = Vec::new();
    let mut labels = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        let med = median(g);
        for &v in g {
            deviations.push((v - med).abs());
            labels.push(gi);
        }
    }
    let n = deviations.len() as f64;
    let scores: Vec<f64> = average_ranks(&deviations)
        .into_iter()
        .map(|r| normal_quantile(0.5 + r / (2.0 * (n + 1.0))))
        .collect();
    let grand = mean(&scores);
    let var = scores.iter().map(|a| (a - grand) * (a - grand)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 || !var.is_finite() {
        return Err(StatsError::Degenerate);
    }
    let k = groups.len();
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (a, &g) in scores.iter().zip(&labels) {
        sums[g] += a;
        counts[g] += 1;
    }
    let between: f64 = (0..k)
        .map(|g| {
            let m = sums[g] / counts[g] as f64;
            counts[g] as f64 * (m - grand) * (m - grand)
        })
        .sum();
    let statistic = between / var;
    let dof = k - 1;
    Ok(VarianceTest {
        statistic,
        dof,
        p_value: chi_square_sf(statistic, dof as f64),
    })
}
