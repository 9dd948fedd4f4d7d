//! Small descriptive statistics shared across modules.
//!
//! Percentiles use linear interpolation between order statistics (the
//! "inclusive" rule): position `p·(n−1)` in the sorted sample.

use serde::{Deserialize, Serialize};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; zero for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn standard_error(xs: &[f64]) -> f64 {
    (sample_variance(xs) / xs.len() as f64).sqrt()
}

/// Percentile of an already sorted slice, `p` in `[0, 1]`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty sample");
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn percentile(xs: &[f64], p: f64) -> f64 {
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, p)
}

/// Median of a sample (interpolated for even sizes).
pub fn median(xs: &[f64]) -> f64 {
    percentile(xs, 0.5)
}

/// Five-number box summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Quantiles {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let mut sorted = xs.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Self {
            min: sorted[0],
            q1: percentile_sorted(&sorted, 0.25),
            median: percentile_sorted(&sorted, 0.5),
            q3: percentile_sorted(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Average ranks (ties share the mean rank), 1-based.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let mx = mean(xs);
    let my = mean(ys);
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    pearson(&ranks(xs), &ranks(ys))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_of_one_to_five() {
        let q = Quantiles::of(&[5.0, 3.0, 1.0, 4.0, 2.0]).unwrap();
        assert_eq!((q.min, q.q1, q.median, q.q3, q.max), (1.0, 2.0, 3.0, 4.0, 5.0));
        assert_eq!(q.iqr(), 2.0);
        assert!(Quantiles::of(&[]).is_none());
    }

    #[test]
    fn percentiles_interpolate() {
        let xs: Vec<f64> = (1..=8).map(f64::from).collect();
        assert_eq!(percentile(&xs, 0.25), 2.75);
        assert_eq!(percentile(&xs, 0.5), 4.5);
        assert_eq!(percentile(&xs, 0.75), 6.25);
        assert_eq!(median(&[1.0, 2.0]), 1.5);
    }

    #[test]
    fn spearman_monotone() {
        let x = [2.0, 4.0, 8.0, 16.0];
        assert!((spearman(&x, &[0.9, 0.5, 0.2, 0.1]) + 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[0.9, 0.2, 0.5, 0.1]) + 0.8).abs() < 1e-12);
        let tied = spearman(&[1.0, 1.0, 2.0], &[3.0, 3.0, 1.0]);
        assert!((tied + 1.0).abs() < 1e-12);
    }

    #[test]
    fn variance_and_se() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert!((sample_variance(&xs) - 5.0 / 3.0).abs() < 1e-12);
        assert!((standard_error(&xs) - (5.0f64 / 12.0).sqrt()).abs() < 1e-12);
        assert_eq!(sample_variance(&[1.0]), 0.0);
    }
}
