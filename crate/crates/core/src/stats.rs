//! Small summary statistics used by the experiment harness.

use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{usage, Result};

/// Linear-interpolated quantile of unsorted data, `q ∈ [0, 1]`.
pub fn quantile(xs: &[f64], q: f64) -> Result<f64> {
    if xs.is_empty() {
        return Err(usage("quantile of an empty sample"));
    }
    if xs.iter().any(|x| x.is_nan()) {
        return Err(usage("quantile of a sample containing NaN"));
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    if v[lo] == v[hi] {
        // also covers repeated infinities, where interpolation would give NaN
        return Ok(v[lo]);
    }
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

pub fn median(xs: &[f64]) -> Result<f64> {
    quantile(xs, 0.5)
}

/// Interquartile range.
pub fn iqr(xs: &[f64]) -> Result<f64> {
    Ok(quantile(xs, 0.75)? - quantile(xs, 0.25)?)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Pearson correlation; errors when either sample is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(usage("pearson needs two samples of equal length ≥ 2"));
    }
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(usage("pearson is undefined for a constant sample"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Outcome of a paired sign test; zero differences are dropped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignTest {
    pub positive: u64,
    pub negative: u64,
    /// Two-sided exact binomial p-value.
    pub p_two_sided: f64,
    /// One-sided p-value for "positive differences dominate".
    pub p_greater: f64,
}

pub fn sign_test(diffs: &[f64]) -> SignTest {
    let positive = diffs.iter().filter(|&&d| d > 0.0).count() as u64;
    let negative = diffs.iter().filter(|&&d| d < 0.0).count() as u64;
    let n = positive + negative;
    if n == 0 {
        return SignTest { positive, negative, p_two_sided: 1.0, p_greater: 1.0 };
    }
    let bin = Binomial::new(0.5, n).expect("valid binomial");
    let tail = |k: u64| if k == 0 { 1.0 } else { 1.0 - bin.cdf(k - 1) };
    let p_greater = tail(positive);
    let p_two_sided = (2.0 * tail(positive.max(negative))).min(1.0);
    SignTest { positive, negative, p_two_sided, p_greater }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
        assert_eq!(iqr(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), 2.0);
        assert!(median(&[]).is_err());
    }

    #[test]
    fn pearson_of_affine_map() {
        let x = [1.0, 2.0, 4.0, 7.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 2.0 * v).collect();
        assert!((pearson(&x, &y).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&x, &[1.0; 4]).is_err());
    }

    #[test]
    fn sign_test_values() {
        let t = sign_test(&[0.0, 0.0]);
        assert_eq!(t.p_two_sided, 1.0);
        let t = sign_test(&[1.0; 10]);
        assert!((t.p_greater - 0.5f64.powi(10)).abs() < 1e-15);
        assert!((t.p_two_sided - 2.0 * 0.5f64.powi(10)).abs() < 1e-15);
        // 8 of 10 positive: P(X ≥ 8) = 56/1024
        let mut d = vec![1.0; 8];
        d.extend([-1.0, -1.0]);
        assert!((sign_test(&d).p_greater - 56.0 / 1024.0).abs() < 1e-12);
    }
}
