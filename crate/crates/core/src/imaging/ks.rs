use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outcome of a two-sample Kolmogorov-Smirnov test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub m: usize,
    pub n: usize,
}

/// Supremum distance between the empirical CDFs of `a` and `b`, evaluated at
/// every observed value.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (m, n) = (xs.len() as f64, ys.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < xs.len() || j < ys.len() {
        let v = match (xs.get(i), ys.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        while i < xs.len() && xs[i] <= v {
            i += 1;
        }
        while j < ys.len() && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / m - j as f64 / n).abs());
    }
    d
}

/// Complementary Kolmogorov distribution `Q(lambda) = 2 sum_{k>=1} (-1)^(k-1) exp(-2 k^2 lambda^2)`,
/// summed until a term falls below 1e-12.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100_000u64 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample KS test with the Stephens small-sample correction
/// `lambda = (sqrt(e) + 0.12 + 0.11 / sqrt(e)) D`, `e = m n / (m + n)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::arg("KS test needs two nonempty samples"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::arg("KS samples must be finite"));
    }
    let d = ks_statistic(a, b);
    let (m, n) = (a.len(), b.len());
    let en = ((m * n) as f64 / (m + n) as f64).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_survival(lambda),
        m,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_samples() {
        let r = ks_two_sample(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn disjoint_samples() {
        let r = ks_two_sample(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.statistic, 1.0);
    }

    #[test]
    fn interleaved_samples() {
        let r = ks_two_sample(&[1.0, 3.0, 5.0], &[2.0, 4.0, 6.0]).unwrap();
        assert!((r.statistic - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        assert!(ks_two_sample(&[], &[1.0]).is_err());
        assert!(ks_two_sample(&[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn survival_reference_values() {
        // Q(1.0) and Q(1.36) of the Kolmogorov distribution
        assert!((kolmogorov_survival(1.0) - 0.269_999_671_677_354_6).abs() < 1e-12);
        assert!((kolmogorov_survival(1.36) - 0.049_485_876_755_377_9).abs() < 1e-12);
    }

    fn sample() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-100.0f64..100.0, 1..40)
    }

    proptest! {
        #[test]
        fn statistic_bounds_and_symmetry(a in sample(), b in sample()) {
            let d = ks_statistic(&a, &b);
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d, ks_statistic(&b, &a));
        }

        #[test]
        fn invariant_under_monotone_transform(a in sample(), b in sample()) {
            let f = |v: &f64| (v / 50.0).exp() * 3.0 + 1.0;
            let ta: Vec<f64> = a.iter().map(f).collect();
            let tb: Vec<f64> = b.iter().map(f).collect();
            prop_assert_eq!(ks_statistic(&a, &b), ks_statistic(&ta, &tb));
        }

        #[test]
        fn p_value_monotone_in_d(m in 1usize..200, n in 1usize..200, d1 in 0.0f64..1.0, d2 in 0.0f64..1.0) {
            let en = ((m * n) as f64 / (m + n) as f64).sqrt();
            let p = |d: f64| kolmogorov_survival((en + 0.12 + 0.11 / en) * d);
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(p(hi) <= p(lo) + 1e-10);
        }
    }
}
