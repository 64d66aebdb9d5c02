use statrs::distribution::{ContinuousCDF, StudentsT};

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n - 1 denominator); zero for fewer than two values.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    /// Two-sided p-value.
    pub p_two_sided: f64,
    /// One-sided p-value for `mean(a) > mean(b)`.
    pub p_greater: f64,
}

/// Paired Student t-test on `a[i] - b[i]`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> PairedTest {
    assert_eq!(a.len(), b.len(), "paired samples need equal lengths");
    assert!(a.len() >= 2, "paired test needs at least two pairs");
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let md = mean(&diffs);
    let sd = std_dev(&diffs);
    if sd == 0.0 {
        let (t, p2, pg) = match md.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => (f64::INFINITY, 0.0, 0.0),
            Some(std::cmp::Ordering::Less) => (f64::NEG_INFINITY, 0.0, 1.0),
            _ => (0.0, 1.0, 0.5),
        };
        return PairedTest {
            n,
            mean_diff: md,
            t,
            p_two_sided: p2,
            p_greater: pg,
        };
    }
    let t = md / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("n >= 2");
    let upper = 1.0 - dist.cdf(t);
    PairedTest {
        n,
        mean_diff: md,
        t,
        p_two_sided: (2.0 * upper.min(1.0 - upper)).min(1.0),
        p_greater: upper,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn std_dev_matches_hand_value() {
        assert!(
            (std_dev(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]) - 2.138_089_935_299_395).abs()
                < 1e-12
        );
        assert_eq!(std_dev(&[3.0]), 0.0);
    }

    #[test]
    fn paired_test_against_reference() {
        // diffs [1, 2, 3, 4]: mean 2.5, sd 1.2910, t = 3.8730 on 3 df,
        // two-sided p = 0.030466 (scipy.stats.ttest_rel).
        let a = [2.0, 4.0, 6.0, 8.0];
        let b = [1.0, 2.0, 3.0, 4.0];
        let r = paired_t_test(&a, &b);
        assert!((r.t - 3.872_983_346_207_417).abs() < 1e-9);
        assert!(
            (r.p_two_sided - 0.030_466).abs() < 1e-5,
            "{}",
            r.p_two_sided
        );
        assert!((r.p_greater - r.p_two_sided / 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_difference_is_degenerate() {
        let r = paired_t_test(&[2.0, 3.0], &[1.0, 2.0]);
        assert_eq!((r.p_two_sided, r.p_greater), (0.0, 0.0));
        let r = paired_t_test(&[1.0, 2.0], &[1.0, 2.0]);
        assert_eq!(r.p_two_sided, 1.0);
    }
}
