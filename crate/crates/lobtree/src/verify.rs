//! Reference laws and distributional tests.
//!
//! The scaling limit of the price is a reflected Brownian motion, so its
//! one-time marginal is a folded normal; the local time of reflected
//! `sigma W` at 0 by time t has the law of `2|N(0,t)|/sigma` (Tanaka: the
//! reflected process solves W = L/2 + martingale, and scaling a path by
//! beta scales its local time by 1/beta). Everything here is analytic on
//! the reference side: no Monte Carlo noise enters a one-sample test.

use statrs::distribution::{ContinuousCDF, Normal};

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// CDF of |N(0, sigma2 * t)|: the time-t marginal of reflected Brownian
/// motion with diffusion coefficient sigma2.
pub fn folded_normal_cdf(sigma2: f64, t: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let sd = (sigma2 * t).sqrt();
    2.0 * std_normal().cdf(x / sd) - 1.0
}

/// E|N(0, sigma2 * t)| = sqrt(2 sigma2 t / pi).
pub fn folded_normal_mean(sigma2: f64, t: f64) -> f64 {
    (2.0 * sigma2 * t / std::f64::consts::PI).sqrt()
}

/// CDF of the time-t local time at 0 of reflected `sigma W`:
/// distributed as 2|N(0,t)|/sigma.
pub fn local_time_cdf(sigma: f64, t: f64, x: f64) -> f64 {
    folded_normal_cdf(1.0, t, x * sigma / 2.0)
}

/// Mean of the time-t local time at 0 of reflected `sigma W`.
pub fn local_time_mean(sigma: f64, t: f64) -> f64 {
    2.0 * folded_normal_mean(1.0, t) / sigma
}

/// One-sample Kolmogorov-Smirnov distance against an exact CDF. Sorts the
/// samples in place.
pub fn ks_one_sample<F: Fn(f64) -> f64>(samples: &mut [f64], cdf: F) -> f64 {
    assert!(!samples.is_empty());
    samples.sort_by(|a, b| a.partial_cmp(b).expect("no NaN samples"));
    let n = samples.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    d
}

/// Two-sample Kolmogorov-Smirnov distance; tie-safe (both empirical CDFs
/// are advanced past a shared value before comparing). Sorts in place.
pub fn ks_two_sample(a: &mut [f64], b: &mut [f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    a.sort_by(|x, y| x.partial_cmp(y).expect("no NaN samples"));
    b.sort_by(|x, y| x.partial_cmp(y).expect("no NaN samples"));
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < n && j < m {
        let v = a[i].min(b[j]);
        while i < n && a[i] == v {
            i += 1;
        }
        while j < m && b[j] == v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    d
}

/// c(alpha) = sqrt(-ln(alpha/2)/2): c(0.05) = 1.358, c(0.01) = 1.628.
fn ks_c(alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt()
}

/// Rejection threshold for the one-sample KS distance at level alpha.
pub fn ks_critical_one(alpha: f64, n: usize) -> f64 {
    ks_c(alpha) / (n as f64).sqrt()
}

/// Rejection threshold for the two-sample KS distance at level alpha.
pub fn ks_critical_two(alpha: f64, n: usize, m: usize) -> f64 {
    let (n, m) = (n as f64, m as f64);
    ks_c(alpha) * ((n + m) / (n * m)).sqrt()
}

/// Asymptotic p-value of a KS distance with effective sample size n_eff
/// (n for one-sample, nm/(n+m) for two-sample).
pub fn ks_p_value(d: f64, n_eff: f64) -> f64 {
    let lambda = n_eff.sqrt() * d;
    let p = if lambda >= 1.0 {
        // direct alternating series, fast for large lambda
        let mut s = 0.0f64;
        for k in 1..=100 {
            let kf = k as f64;
            let term = 2.0 * (-1.0f64).powi(k + 1) * (-2.0 * kf * kf * lambda * lambda).exp();
            s += term;
            if term.abs() < 1e-14 {
                break;
            }
        }
        s
    } else {
        // Jacobi-transformed series, fast for small lambda
        let mut s = 0.0f64;
        for k in 1..=100 {
            let odd = (2 * k - 1) as f64;
            let term = (-odd * odd * std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda)).exp();
            s += term;
            if term < 1e-300 {
                break;
            }
        }
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s
    };
    p.clamp(0.0, 1.0)
}

/// Ranks with ties replaced by their average rank (1-based).
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].partial_cmp(&x[j]).expect("no NaN samples"));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Lag-1 Spearman autocorrelation: the series is ranked once (average
/// ranks), then consecutive rank pairs are Pearson-correlated. Under
/// independence the null SD is about 1/sqrt(len - 1).
pub fn spearman_lag1(x: &[f64]) -> f64 {
    assert!(x.len() >= 3);
    let r = average_ranks(x);
    pearson(&r[..r.len() - 1], &r[1..])
}

/// One test verdict: a statistic against its pre-registered threshold.
#[derive(Debug, Clone)]
pub struct TestResult {
    pub name: String,
    /// KS distance, |correlation|, relative deviation, ... depending on test.
    pub statistic: f64,
    /// Pass iff statistic <= threshold.
    pub threshold: f64,
    pub pass: bool,
    pub samples: (usize, usize),
    pub p_value: Option<f64>,
    pub detail: String,
}

impl TestResult {
    pub fn new(name: impl Into<String>, statistic: f64, threshold: f64) -> Self {
        TestResult {
            name: name.into(),
            statistic,
            threshold,
            pass: statistic <= threshold,
            samples: (0, 0),
            p_value: None,
            detail: String::new(),
        }
    }

    pub fn with_samples(mut self, n: usize, m: usize) -> Self {
        self.samples = (n, m);
        self
    }

    pub fn with_p_value(mut self, p: f64) -> Self {
        self.p_value = Some(p);
        self
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

/// Running mean/variance accumulator that merges across blocks in a fixed
/// order, so parallel reductions stay deterministic.
#[derive(Debug, Clone, Copy, Default)]
pub struct Moments {
    pub n: u64,
    pub sum: f64,
    pub sum_sq: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn merge(&mut self, other: &Moments) {
        self.n += other.n;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }

    /// Unbiased sample variance.
    pub fn var(&self) -> f64 {
        let n = self.n as f64;
        ((self.sum_sq - self.sum * self.sum / n) / (n - 1.0)).max(0.0)
    }

    /// Standard error of the mean.
    pub fn se(&self) -> f64 {
        (self.var() / self.n as f64).sqrt()
    }
}

/// Bernoulli frequency accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct Freq {
    pub hits: u64,
    pub n: u64,
}

impl Freq {
    pub fn push(&mut self, hit: bool) {
        self.hits += u64::from(hit);
        self.n += 1;
    }

    pub fn merge(&mut self, other: &Freq) {
        self.hits += other.hits;
        self.n += other.n;
    }

    pub fn p(&self) -> f64 {
        self.hits as f64 / self.n as f64
    }

    pub fn se(&self) -> f64 {
        let p = self.p();
        (p * (1.0 - p) / self.n as f64).sqrt()
    }
}
