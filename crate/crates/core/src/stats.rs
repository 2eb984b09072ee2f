//! Order-fixed reductions and Monte Carlo error bars.

use serde::{Deserialize, Serialize};

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn compensated_sum<'a>(xs: impl IntoIterator<Item = &'a f64>) -> f64 {
    let mut s = CompensatedSum::new();
    for x in xs {
        s.add(*x);
    }
    s.value()
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl Estimate {
    /// Mean and standard error of i.i.d. samples. One sample gives a zero error.
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std_error: f64::NAN,
                n: 0,
            };
        }
        let mean = compensated_sum(xs) / n as f64;
        if n == 1 {
            return Self {
                mean,
                std_error: 0.0,
                n,
            };
        }
        let mut ss = CompensatedSum::new();
        for x in xs {
            ss.add((x - mean) * (x - mean));
        }
        let var = ss.value() / (n - 1) as f64;
        Self {
            mean,
            std_error: (var / n as f64).sqrt(),
            n,
        }
    }

    pub fn sample_variance(&self) -> f64 {
        self.std_error * self.std_error * self.n as f64
    }
}

/// Standard error of a difference of two independent estimates.
pub fn combined_sigma(a: &Estimate, b: &Estimate) -> f64 {
    a.std_error.hypot(b.std_error)
}

/// `a` exceeds `b` by more than `k` combined standard errors.
pub fn decreases_beyond(a: &Estimate, b: &Estimate, k: f64) -> bool {
    a.mean - b.mean > k * combined_sigma(a, b)
}

/// Least-squares slope of `ys` against `xs`.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = compensated_sum(xs) / n;
    let my = compensated_sum(ys) / n;
    let mut sxy = CompensatedSum::new();
    let mut sxx = CompensatedSum::new();
    for (x, y) in xs.iter().zip(ys) {
        sxy.add((x - mx) * (y - my));
        sxx.add((x - mx) * (x - mx));
    }
    sxy.value() / sxx.value()
}

/// Slope with its classical standard error.
pub fn ls_slope_with_error(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let slope = ls_slope(xs, ys);
    let mx = compensated_sum(xs) / n as f64;
    let my = compensated_sum(ys) / n as f64;
    let mut rss = CompensatedSum::new();
    let mut sxx = CompensatedSum::new();
    for (x, y) in xs.iter().zip(ys) {
        let r = y - my - slope * (x - mx);
        rss.add(r * r);
        sxx.add((x - mx) * (x - mx));
    }
    let se = (rss.value() / (n as f64 - 2.0) / sxx.value()).sqrt();
    (slope, se)
}
