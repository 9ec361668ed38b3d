//! Self-contained statistics toolkit backing the verification suite.
//!
//! Only the tests the suite needs: Wilson and normal intervals, one- and
//! two-sample Kolmogorov–Smirnov, a chi-square independence test, a Poisson
//! dispersion test and a correlation interval. KS p-values come from the
//! asymptotic series (all uses here have n >= 1e3), evaluated at the
//! Stephens-corrected argument.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CiMethod {
    Wilson,
    Normal,
}

/// A Monte Carlo estimate with a confidence interval.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n: usize,
    pub method: CiMethod,
}

impl Estimate {
    pub fn half_width(&self) -> f64 {
        0.5 * (self.ci_hi - self.ci_lo)
    }

    /// |mean - target| <= k half-widths of the interval.
    pub fn within_half_widths(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.half_width()
    }

    pub fn brackets(&self, target: f64) -> bool {
        self.ci_lo <= target && target <= self.ci_hi
    }
}

/// Wilson score interval for `successes` out of `n` at critical value `z`.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> Result<Estimate> {
    if n == 0 {
        return Err(Error::EmptyInput("wilson_interval: n = 0".into()));
    }
    if successes > n {
        return Err(Error::invalid(format!(
            "wilson_interval: successes {successes} > n {n}"
        )));
    }
    if z <= 0.0 {
        return Err(Error::invalid("wilson_interval: z must be positive"));
    }
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    // at the boundary counts the interval endpoints are exact
    let ci_lo = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let ci_hi = if successes == n { 1.0 } else { (center + half).min(1.0) };
    Ok(Estimate {
        mean: p,
        ci_lo,
        ci_hi,
        n,
        method: CiMethod::Wilson,
    })
}

pub fn mean_var(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Normal interval `mean ± z s/sqrt(n)` from raw samples.
pub fn normal_interval(samples: &[f64], z: f64) -> Result<Estimate> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("normal_interval: no samples".into()));
    }
    let (mean, var) = mean_var(samples);
    let se = (var / samples.len() as f64).sqrt();
    Ok(Estimate {
        mean,
        ci_lo: mean - z * se,
        ci_hi: mean + z * se,
        n: samples.len(),
        method: CiMethod::Normal,
    })
}

/// Survival function of the Kolmogorov distribution,
/// `Q(x) = 2 sum_{j>=1} (-1)^{j-1} exp(-2 j^2 x^2)`, with the
/// theta-dual series for small arguments.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 1.18 {
        // dual series converges fast for small x
        let t = std::f64::consts::PI * std::f64::consts::PI / (8.0 * x * x);
        let mut cdf = 0.0;
        for j in 1..100u32 {
            let m = (2 * j - 1) as f64;
            let term = (-m * m * t).exp();
            cdf += term;
            if term < 1e-16 * cdf {
                break;
            }
        }
        cdf *= (2.0 * std::f64::consts::PI).sqrt() / x;
        (1.0 - cdf).clamp(0.0, 1.0)
    } else {
        let mut sf = 0.0;
        let mut sign = 1.0;
        for j in 1..100u32 {
            let jf = j as f64;
            let term = (-2.0 * jf * jf * x * x).exp();
            sf += sign * term;
            sign = -sign;
            if term < 1e-16 {
                break;
            }
        }
        (2.0 * sf).clamp(0.0, 1.0)
    }
}

fn ks_p_value(d: f64, n_eff: f64) -> f64 {
    let s = n_eff.sqrt();
    kolmogorov_sf((s + 0.12 + 0.11 / s) * d)
}

/// One-sample KS test of `samples` (need not be sorted) against `cdf`.
/// Returns `(D, p)`.
pub fn ks_one_sample(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("ks_one_sample: no samples".into()));
    }
    if samples.len() < 8 {
        return Err(Error::invalid("ks_one_sample: need at least 8 samples"));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("NaN sample"));
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in xs.iter().enumerate() {
        let f = cdf(*x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - f).abs());
    }
    Ok((d, ks_p_value(d, n)))
}

/// Two-sample KS test; symmetric in its arguments. Returns `(D, p)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("ks_two_sample: empty sample".into()));
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(|u, v| u.partial_cmp(v).expect("NaN sample"));
    ys.sort_by(|u, v| u.partial_cmp(v).expect("NaN sample"));
    let (na, nb) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < xs.len() && j < ys.len() {
        // consume whole runs of ties before comparing the ECDFs
        let t = xs[i].min(ys[j]);
        while i < xs.len() && xs[i] == t {
            i += 1;
        }
        while j < ys.len() && ys[j] == t {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d = d.max(1.0 - (i as f64 / na).min(j as f64 / nb)).min(1.0);
    let n_eff = na * nb / (na + nb);
    Ok((d, ks_p_value(d, n_eff)))
}

// --- incomplete gamma machinery for the chi-square distribution ---

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, n = 9
    const COEF: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower incomplete gamma P(a, x).
fn gamma_p(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        // series
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..500 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-15 {
                break;
            }
        }
        (sum * (-x + a * x.ln() - ln_gamma(a)).exp()).clamp(0.0, 1.0)
    } else {
        // continued fraction (modified Lentz)
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-15 {
                break;
            }
        }
        let q = ((-x + a * x.ln() - ln_gamma(a)).exp()) * h;
        (1.0 - q).clamp(0.0, 1.0)
    }
}

pub fn chi2_cdf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_p(0.5 * df, 0.5 * x)
    }
}

/// Chi-square quantile by bisection on the CDF.
pub fn chi2_quantile(p: f64, df: f64) -> f64 {
    assert!((0.0..1.0).contains(&p) && df > 0.0);
    if p == 0.0 {
        return 0.0;
    }
    let mut hi = df + 10.0 * (2.0 * df).sqrt() + 10.0;
    while chi2_cdf(hi, df) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(mid, df) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Pearson chi-square test of independence on a contingency table.
/// Returns `(statistic, p)`.
pub fn chi2_independence(table: &[Vec<u64>]) -> Result<(f64, f64)> {
    let r = table.len();
    if r < 2 || table[0].len() < 2 {
        return Err(Error::Degenerate("chi2: table needs at least 2x2".into()));
    }
    let c = table[0].len();
    if table.iter().any(|row| row.len() != c) {
        return Err(Error::invalid("chi2: ragged table"));
    }
    let row_sums: Vec<f64> = table.iter().map(|row| row.iter().sum::<u64>() as f64).collect();
    let col_sums: Vec<f64> = (0..c)
        .map(|j| table.iter().map(|row| row[j]).sum::<u64>() as f64)
        .collect();
    let total: f64 = row_sums.iter().sum();
    if row_sums.iter().any(|&s| s == 0.0) || col_sums.iter().any(|&s| s == 0.0) {
        return Err(Error::Degenerate("chi2: empty row or column".into()));
    }
    let mut stat = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &o) in row.iter().enumerate() {
            let e = row_sums[i] * col_sums[j] / total;
            let diff = o as f64 - e;
            stat += diff * diff / e;
        }
    }
    let df = ((r - 1) * (c - 1)) as f64;
    Ok((stat, 1.0 - chi2_cdf(stat, df)))
}

/// Index-of-dispersion test for Poisson counts. Returns the observed
/// variance/mean ratio and a 95% interval for the true ratio, built from
/// `(n-1) s^2 / mean ~ chi^2_{n-1}` under the Poisson null.
pub fn poisson_dispersion(counts: &[u64]) -> Result<(f64, (f64, f64))> {
    if counts.len() < 2 {
        return Err(Error::EmptyInput("poisson_dispersion: need >= 2 counts".into()));
    }
    let xs: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let (mean, var) = mean_var(&xs);
    if mean == 0.0 {
        return Err(Error::Degenerate("poisson_dispersion: zero mean".into()));
    }
    let ratio = var / mean;
    let df = (counts.len() - 1) as f64;
    let q = df * ratio;
    let lo = q / chi2_quantile(0.975, df);
    let hi = q / chi2_quantile(0.025, df);
    Ok((ratio, (lo, hi)))
}

/// Pearson correlation with a Fisher-z 95% interval.
pub fn correlation_ci(x: &[f64], y: &[f64]) -> Result<(f64, (f64, f64))> {
    if x.len() != y.len() {
        return Err(Error::invalid("correlation_ci: length mismatch"));
    }
    if x.len() < 4 {
        return Err(Error::EmptyInput("correlation_ci: need >= 4 pairs".into()));
    }
    let n = x.len() as f64;
    let (mx, vx) = mean_var(x);
    let (my, vy) = mean_var(y);
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Degenerate("correlation_ci: zero variance".into()));
    }
    let cov = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / (n - 1.0);
    let r = (cov / (vx * vy).sqrt()).clamp(-1.0, 1.0);
    let z = 0.5 * ((1.0 + r) / (1.0 - r)).ln();
    let se = 1.0 / (n - 3.0).sqrt();
    let (zl, zh) = (z - 1.96 * se, z + 1.96 * se);
    Ok((r, (zl.tanh(), zh.tanh())))
}
