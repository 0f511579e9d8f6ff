//! Two-sample Welch t-test and the special functions behind its p-value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub df: f64,
    /// Two-sided.
    pub p: f64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, ss / (n - 1.0))
}

pub fn welch_t_test(x: &[f64], y: &[f64]) -> Result<WelchResult> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "welch_t_test needs at least 2 samples per group, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::DegenerateInput(
            "welch_t_test input contains non-finite values".into(),
        ));
    }
    let (mx, vx) = mean_var(x);
    let (my, vy) = mean_var(y);
    let a = vx / x.len() as f64;
    let b = vy / y.len() as f64;
    if a + b == 0.0 {
        return Err(Error::DegenerateInput(
            "both samples have zero variance".into(),
        ));
    }
    let t = (mx - my) / (a + b).sqrt();
    let df = (a + b) * (a + b) / (a * a / (x.len() - 1) as f64 + b * b / (y.len() - 1) as f64);
    Ok(WelchResult {
        t,
        df,
        p: student_t_two_sided(t, df),
    })
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    regularized_incomplete_beta(df / (df + t * t), df / 2.0, 0.5).clamp(0.0, 1.0)
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// `I_x(a, b)` by the continued fraction, using the symmetry
/// `I_x(a, b) = 1 − I_{1−x}(b, a)` where that converges faster.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        (ln_front.exp() * beta_continued_fraction(x, a, b)) / a
    } else {
        1.0 - (ln_front.exp() * beta_continued_fraction(1.0 - x, b, a)) / b
    }
}

/// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub positive: usize,
    pub negative: usize,
    pub ties: usize,
    /// One-sided `P(N_neg ≥ negative)` under a fair coin over the untied pairs.
    pub p_negative: f64,
    pub p_two_sided: f64,
}

/// Exact binomial sign test on paired differences. Zero differences are
/// dropped as ties.
pub fn sign_test(differences: &[f64]) -> Result<SignTest> {
    let positive = differences.iter().filter(|&&d| d > 0.0).count();
    let negative = differences.iter().filter(|&&d| d < 0.0).count();
    let ties = differences.len() - positive - negative;
    let n = positive + negative;
    if n == 0 {
        return Err(Error::DegenerateInput(
            "sign test has no untied pairs".into(),
        ));
    }
    let ln_pmf = |k: usize| {
        ln_gamma(n as f64 + 1.0)
            - ln_gamma(k as f64 + 1.0)
            - ln_gamma((n - k) as f64 + 1.0)
            - n as f64 * 2f64.ln()
    };
    let upper = |from: usize| (from..=n).map(|k| ln_pmf(k).exp()).sum::<f64>().min(1.0);
    let p_negative = upper(negative);
    let p_two_sided = (2.0 * upper(positive.max(negative))).min(1.0);
    Ok(SignTest {
        positive,
        negative,
        ties,
        p_negative,
        p_two_sided,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_known_values() {
        let cases = [
            (1.0, 0.0),
            (2.0, 0.0),
            (0.5, 0.572_364_942_924_700_1),
            (10.0, 12.801_827_480_081_469),
            (100.5, 361.435_540_467_777_6),
        ];
        for (x, want) in cases {
            assert!(
                (ln_gamma(x) - want).abs() < 1e-12 * want.abs().max(1.0),
                "{x}"
            );
        }
    }

    #[test]
    fn beta_closed_forms() {
        // I_x(1, 1) = x, I_x(a, 1) = x^a, I_x(1, b) = 1 − (1−x)^b
        for &x in &[0.01, 0.3, 0.5, 0.77, 0.999] {
            assert!((regularized_incomplete_beta(x, 1.0, 1.0) - x).abs() < 1e-14);
            assert!((regularized_incomplete_beta(x, 3.5, 1.0) - x.powf(3.5)).abs() < 1e-13);
            assert!(
                (regularized_incomplete_beta(x, 1.0, 2.5) - (1.0 - (1.0 - x).powf(2.5))).abs()
                    < 1e-13
            );
        }
    }

    #[test]
    fn t_with_one_df_is_cauchy() {
        for &t in &[0.3f64, 1.0, 4.0, 50.0] {
            let want = 1.0 - 2.0 * t.atan() / std::f64::consts::PI;
            let got = student_t_two_sided(t, 1.0);
            assert!(((got - want) / want).abs() < 1e-12, "{t}: {got} vs {want}");
        }
    }

    #[test]
    fn identical_samples() {
        let x = [0.1, 0.4, 0.35, 0.9];
        let r = welch_t_test(&x, &x).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
    }

    #[test]
    fn antisymmetric() {
        let x = [0.1, 0.4, 0.35, 0.9, 0.2];
        let y = [0.5, 0.45, 0.8, 0.7];
        let (a, b) = (welch_t_test(&x, &y).unwrap(), welch_t_test(&y, &x).unwrap());
        assert_eq!(a.t, -b.t);
        assert_eq!(a.p, b.p);
        assert_eq!(a.df, b.df);
    }

    #[test]
    fn p_decreases_with_shift() {
        let x = [0.1, 0.4, 0.35, 0.9, 0.2, 0.55];
        let mut last = 1.0;
        for s in 1..30 {
            let y: Vec<f64> = x.iter().map(|v| v + s as f64 * 0.05).collect();
            let p = welch_t_test(&x, &y).unwrap().p;
            assert!(p < last, "shift {s}");
            last = p;
        }
    }

    #[test]
    fn degenerate_inputs() {
        assert!(welch_t_test(&[1.0], &[1.0, 2.0]).is_err());
        assert!(welch_t_test(&[1.0, 1.0], &[2.0, 2.0]).is_err());
        assert!(welch_t_test(&[1.0, 1.0], &[2.0, 3.0]).is_ok());
    }

    #[test]
    fn sign_test_exact() {
        // 9 of 10 negative: P(X ≥ 9) = 11/1024
        let d: Vec<f64> = (0..10)
            .map(|i| if i == 0 { 1.0 } else { -1.0 })
            .chain([0.0])
            .collect();
        let s = sign_test(&d).unwrap();
        assert_eq!((s.positive, s.negative, s.ties), (1, 9, 1));
        assert!((s.p_negative - 11.0 / 1024.0).abs() < 1e-14);
        assert!((s.p_two_sided - 22.0 / 1024.0).abs() < 1e-14);
        assert!(sign_test(&[0.0]).is_err());
    }
}
