//! Distribution tests and small regression helpers for the property suites.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Significance level for distribution tests across the repo.
pub const SIGNIFICANCE: f64 = 0.01;

/// Width, in standard errors, of mean tests across the repo.
pub const MEAN_SIGMAS: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TestOutcome {
    pub statistic: f64,
    pub p_value: f64,
}

impl TestOutcome {
    pub fn passes(&self, alpha: f64) -> bool {
        self.p_value >= alpha
    }
}

/// Survival function of the Kolmogorov distribution, `P[K > λ]`.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    if lambda < 1.0 {
        // small-λ series converges faster through the theta-function identity
        let s = (2.0 * std::f64::consts::PI).sqrt() / lambda;
        let mut cdf = 0.0;
        for k in 1..=50 {
            let j = (2 * k - 1) as f64;
            cdf += (-(j * j) * std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda)).exp();
        }
        return (1.0 - s * cdf).clamp(0.0, 1.0);
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn sorted(data: &[f64]) -> Vec<f64> {
    let mut v = data.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

fn ks_p_value(d: f64, effective_n: f64) -> f64 {
    let sn = effective_n.sqrt();
    kolmogorov_survival((sn + 0.12 + 0.11 / sn) * d)
}

/// Two-sample Kolmogorov–Smirnov test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> TestOutcome {
    assert!(
        !a.is_empty() && !b.is_empty(),
        "KS test needs data on both sides"
    );
    let a = sorted(a);
    let b = sorted(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    TestOutcome {
        statistic: d,
        p_value: ks_p_value(d, na * nb / (na + nb)),
    }
}

/// One-sample Kolmogorov–Smirnov test against a continuous CDF.
pub fn ks_one_sample<F: Fn(f64) -> f64>(data: &[f64], cdf: F) -> TestOutcome {
    assert!(!data.is_empty());
    let x = sorted(data);
    let n = x.len() as f64;
    let d = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    TestOutcome {
        statistic: d,
        p_value: ks_p_value(d, n),
    }
}

/// Pearson chi-square goodness of fit against equal expected counts.
pub fn chi_square_uniform(counts: &[u64]) -> TestOutcome {
    let k = counts.len();
    assert!(k >= 2);
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / k as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let dist = ChiSquared::new((k - 1) as f64).expect("positive degrees of freedom");
    TestOutcome {
        statistic: stat,
        p_value: 1.0 - dist.cdf(stat),
    }
}

/// Standard error of a binomial proportion.
pub fn binomial_se(p: f64, n: u64) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// `|observed - expected| ≤ sigmas · se(expected)`.
pub fn within_binomial(observed: f64, expected: f64, n: u64, sigmas: f64) -> bool {
    (observed - expected).abs() <= sigmas * binomial_se(expected, n)
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let v = sorted(values);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Ordinary least squares `y ≈ a + b·x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    LinearFit {
        intercept,
        slope,
        r_squared: r_squared(y, x.iter().map(|a| intercept + slope * a)),
    }
}

/// `1 - SS_res / SS_tot`, with `SS_tot` taken about the mean of `y`.
pub fn r_squared<I: IntoIterator<Item = f64>>(y: &[f64], fitted: I) -> f64 {
    let n = y.len() as f64;
    let my = y.iter().sum::<f64>() / n;
    let ss_res: f64 = y.iter().zip(fitted).map(|(a, f)| (a - f).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|a| (a - my).powi(2)).sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SimRng;

    #[test]
    fn kolmogorov_survival_known_points() {
        // tabulated critical values of the limiting distribution
        assert!((kolmogorov_survival(1.358) - 0.05).abs() < 1e-3);
        assert!((kolmogorov_survival(1.628) - 0.01).abs() < 1e-3);
        assert!((kolmogorov_survival(0.828) - 0.5).abs() < 2e-3);
        // both branches agree near the switch
        assert!((kolmogorov_survival(0.999_999) - kolmogorov_survival(1.000_001)).abs() < 1e-5);
    }

    #[test]
    fn ks_detects_shift_and_accepts_same_law() {
        let mut r = SimRng::new(3);
        let a: Vec<f64> = (0..5000).map(|_| r.normal()).collect();
        let b: Vec<f64> = (0..5000).map(|_| r.normal()).collect();
        let c: Vec<f64> = (0..5000).map(|_| r.normal() + 0.2).collect();
        assert!(ks_two_sample(&a, &b).passes(SIGNIFICANCE));
        assert!(!ks_two_sample(&a, &c).passes(SIGNIFICANCE));
        let u: Vec<f64> = (0..5000).map(|_| r.uniform()).collect();
        assert!(ks_one_sample(&u, |x| x.clamp(0.0, 1.0)).passes(SIGNIFICANCE));
        assert!(!ks_one_sample(&u, |x| x.clamp(0.0, 1.0).powi(2)).passes(SIGNIFICANCE));
    }

    #[test]
    fn chi_square_flags_skew() {
        assert!(chi_square_uniform(&[100, 100, 100, 100]).passes(SIGNIFICANCE));
        assert!(!chi_square_uniform(&[150, 100, 100, 50]).passes(SIGNIFICANCE));
    }

    #[test]
    fn fits() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [3.0, 5.0, 7.0, 9.0];
        let f = linear_fit(&x, &y);
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
