//! Correlation analysis: Pearson and Spearman with t-distribution p-values,
//! and ordinary least-squares fits.
//!
//! p-values use the two-sided t approximation t = r sqrt(n-2)/sqrt(1-r^2)
//! with n-2 degrees of freedom; the survival function comes from the
//! regularized incomplete beta function. For small samples an exact
//! permutation p-value for Spearman is available behind `spearman_exact`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_series(xs: &[f64], ys: &[f64], min_n: usize) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension(format!(
            "series lengths {} and {} differ",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < min_n {
        return Err(Error::Degenerate(format!("need at least {min_n} points, got {}", xs.len())));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample Pearson correlation with a two-sided p-value.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    check_series(xs, ys, 3)?;
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("zero variance in correlation input".into()));
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let p = pearson_p_value(r, xs.len())?;
    Ok((r, p))
}

/// Two-sided p-value for a correlation coefficient at sample size n.
pub fn pearson_p_value(r: f64, n: usize) -> Result<f64> {
    if n < 3 {
        return Err(Error::Degenerate("p-value needs n >= 3".into()));
    }
    if !(-1.0..=1.0).contains(&r) {
        return Err(Error::Contract(format!("correlation {r} outside [-1,1]")));
    }
    if r.abs() >= 1.0 {
        return Ok(0.0); // limit of the t statistic
    }
    let df = (n - 2) as f64;
    let t = r * df.sqrt() / (1.0 - r * r).sqrt();
    Ok((2.0 * student_t_sf(t.abs(), df)).min(1.0))
}

/// Average ranks with ties receiving the mean of their positions (1-based).
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with the t-approximated p-value.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    check_series(xs, ys, 3)?;
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

/// Exact permutation p-value for Spearman's rho; feasible only for n <= 10.
pub fn spearman_exact(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    check_series(xs, ys, 3)?;
    let n = xs.len();
    if n > 10 {
        return Err(Error::Contract(format!(
            "exact permutation p-value limited to n <= 10, got {n}"
        )));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let (rho, _) = pearson(&rx, &ry)?;

    // Enumerate all permutations of ry against fixed rx.
    let mut perm: Vec<usize> = (0..n).collect();
    let mut count_extreme = 0u64;
    let mut total = 0u64;
    let observed = rho.abs() - 1e-12;
    loop {
        let permuted: Vec<f64> = perm.iter().map(|&i| ry[i]).collect();
        let (r, _) = pearson(&rx, &permuted)?;
        if r.abs() >= observed {
            count_extreme += 1;
        }
        total += 1;
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok((rho, count_extreme as f64 / total as f64))
}

fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Ordinary least squares `y = slope x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    check_series(xs, ys, 2)?;
    let (mx, my) = (mean(xs), mean(ys));
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 {
        return Err(Error::Degenerate("zero x variance in linear fit".into()));
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// One-sided survival function of Student's t distribution.
///
/// For t >= 0: sf(t) = I_{df/(df+t^2)}(df/2, 1/2) / 2 via the regularized
/// incomplete beta function; symmetry handles t < 0.
pub fn student_t_sf(t: f64, df: f64) -> f64 {
    assert!(df >= 1.0, "degrees of freedom must be >= 1");
    if t < 0.0 {
        return 1.0 - student_t_sf(-t, df);
    }
    let x = df / (df + t * t);
    0.5 * regularized_incomplete_beta(0.5 * df, 0.5, x)
}

/// Regularized incomplete beta I_x(a, b) by Lentz's continued fraction.
/// Both branches evaluate the fraction directly (no recursion), so the
/// symmetric boundary x = (a+1)/(a+b+2) is safe.
fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front = (a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b)).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
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
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Lanczos approximation (g = 7, n = 9), accurate to ~1e-13 for x > 0.
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * x).sin().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// One point of the study: a sweep configuration with its validation distance
/// and downstream detection quality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationPoint {
    pub config_id: String,
    pub lpips: f64,
    pub map_mean: f64,
    pub map_std: f64,
}

/// Full correlation report in the shape of the study figure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub n: usize,
    pub pearson_r: f64,
    pub pearson_p: f64,
    pub spearman_rho: f64,
    pub spearman_p: f64,
    pub fit_slope: f64,
    pub fit_intercept: f64,
    pub points: Vec<CorrelationPoint>,
}

/// Correlate per-config perceptual distances against detection quality.
pub fn correlation_report(points: Vec<CorrelationPoint>) -> Result<CorrelationReport> {
    let xs: Vec<f64> = points.iter().map(|p| p.lpips).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.map_mean).collect();
    let (pearson_r, pearson_p) = pearson(&xs, &ys)?;
    let (spearman_rho, spearman_p) = spearman(&xs, &ys)?;
    let (fit_slope, fit_intercept) = linear_fit(&xs, &ys)?;
    Ok(CorrelationReport {
        n: points.len(),
        pearson_r,
        pearson_p,
        spearman_rho,
        spearman_p,
        fit_slope,
        fit_intercept,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_exact_linearity() {
        let (r, _) = pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn pearson_reported_study_p_values() {
        // r = -0.85, n = 15 -> p ~= 5.88e-5; r = -0.68 -> p ~= 5.35e-3
        let p1 = pearson_p_value(-0.85, 15).unwrap();
        assert!(
            (p1 - 5.88e-5).abs() / 5.88e-5 < 0.20,
            "p = {p1}, expected within 20% of 5.88e-5"
        );
        let p2 = pearson_p_value(-0.68, 15).unwrap();
        assert!(
            (p2 - 5.35e-3).abs() / 5.35e-3 < 0.20,
            "p = {p2}, expected within 20% of 5.35e-3"
        );
    }

    #[test]
    fn pearson_degenerate_inputs() {
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn perfect_correlation_p_is_zero_limit() {
        let (r, p) = pearson(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]).unwrap();
        assert_eq!(r, 1.0);
        assert_eq!(p, 0.0);
    }

    #[test]
    fn spearman_monotone_map_is_one() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ys: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let (rho, _) = spearman(&xs, &ys).unwrap();
        assert_eq!(rho, 1.0);
    }

    #[test]
    fn spearman_reversed_is_minus_one() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [4.0, 3.0, 2.0, 1.0];
        let (rho, _) = spearman(&xs, &ys).unwrap();
        assert_eq!(rho, -1.0);
    }

    #[test]
    fn tie_ranking_uses_mean_ranks() {
        let ranks = average_ranks(&[1.0, 2.0, 2.0, 3.0]);
        assert_eq!(ranks, vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn spearman_equals_pearson_of_ranks_without_ties() {
        let xs = [0.3, 1.7, 0.9, 2.4, 1.1];
        let ys = [5.0, 2.0, 9.0, 1.0, 4.0];
        let (rho, _) = spearman(&xs, &ys).unwrap();
        let (r, _) = pearson(&average_ranks(&xs), &average_ranks(&ys)).unwrap();
        assert_eq!(rho, r);
    }

    #[test]
    fn spearman_exact_small_sample() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ys = [1.0, 3.0, 2.0, 5.0, 4.0];
        let (rho, p) = spearman_exact(&xs, &ys).unwrap();
        assert!(rho > 0.0);
        assert!(p > 0.0 && p <= 1.0);
        // and matches the observed rho from the t-route
        let (rho_t, _) = spearman(&xs, &ys).unwrap();
        assert_eq!(rho, rho_t);
        // n too large for enumeration is rejected
        let big: Vec<f64> = (0..11).map(|v| v as f64).collect();
        assert!(spearman_exact(&big, &big).is_err());
    }

    #[test]
    fn linear_fit_exact_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let (slope, intercept) = linear_fit(&xs, &ys).unwrap();
        assert_eq!(slope, 2.0);
        assert_eq!(intercept, 1.0);
    }

    #[test]
    fn linear_fit_constant_ys() {
        let (slope, intercept) = linear_fit(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]).unwrap();
        assert_eq!(slope, 0.0);
        assert_eq!(intercept, 4.0);
    }

    #[test]
    fn linear_fit_matches_normal_equations() {
        let xs = [0.5, 1.5, 3.0, 4.0];
        let ys = [1.1, 1.9, 4.2, 4.8];
        let (slope, intercept) = linear_fit(&xs, &ys).unwrap();
        // hand-solved normal equations
        let n = 4.0;
        let sx: f64 = xs.iter().sum();
        let sy: f64 = ys.iter().sum();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let sxy: f64 = xs.iter().zip(ys.iter()).map(|(x, y)| x * y).sum();
        let want_slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let want_intercept = (sy - want_slope * sx) / n;
        assert!((slope - want_slope).abs() < 1e-9);
        assert!((intercept - want_intercept).abs() < 1e-9);
        assert!(linear_fit(&[2.0, 2.0], &[1.0, 3.0]).is_err());
    }

    #[test]
    fn t_sf_at_zero_is_half() {
        for df in [1.0, 5.0, 13.0, 30.0] {
            assert!((student_t_sf(0.0, df) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn t_sf_cauchy_quartile() {
        // df = 1 is Cauchy: sf(1) = 1/2 - atan(1)/pi = 1/4
        assert!((student_t_sf(1.0, 1.0) - 0.25).abs() < 1e-10);
    }

    #[test]
    fn t_sf_normal_limit() {
        // large df approaches the normal tail: sf(1.96) -> 0.025
        let sf = student_t_sf(1.96, 1e6);
        assert!((sf - 0.025).abs() < 1e-4, "sf = {sf}");
    }

    /// Simpson-rule quadrature of the t density as an independent oracle.
    /// The body [t, T] is integrated directly; the heavy tail [T, inf) uses
    /// the substitution x = 1/w, which maps it to the finite interval
    /// (0, 1/T] with a bounded integrand for df >= 1.
    fn t_sf_by_integration(t: f64, df: f64) -> f64 {
        let log_norm = ln_gamma((df + 1.0) / 2.0)
            - ln_gamma(df / 2.0)
            - 0.5 * (df * std::f64::consts::PI).ln();
        let pdf = |x: f64| (log_norm - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();

        let simpson = |f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, n: usize| -> f64 {
            let h = (hi - lo) / n as f64;
            let mut acc = f(lo) + f(hi);
            for i in 1..n {
                let x = lo + i as f64 * h;
                acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
            }
            acc * h / 3.0
        };

        let cutoff = t.max(1.0) * 50.0;
        let body = simpson(&|x| pdf(x), t, cutoff, 200_000);
        let tail_integrand = |w: f64| {
            if w <= 0.0 {
                0.0
            } else {
                pdf(1.0 / w) / (w * w)
            }
        };
        let tail = simpson(&tail_integrand, 0.0, 1.0 / cutoff, 200_000);
        body + tail
    }

    #[test]
    fn t_sf_matches_quadrature_oracle() {
        for df in [1.0, 5.0, 13.0, 30.0] {
            for t in [0.5, 1.0, 2.5, 5.8] {
                let got = student_t_sf(t, df);
                let want = t_sf_by_integration(t, df);
                assert!(
                    (got - want).abs() < 1e-6,
                    "df={df} t={t}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn p_value_monotone_in_abs_r() {
        let mut prev = 1.1;
        for r in [0.1, 0.3, 0.5, 0.7, 0.9, 0.99] {
            let p = pearson_p_value(r, 15).unwrap();
            assert!(p < prev, "p not decreasing at r={r}");
            prev = p;
        }
    }

    #[test]
    fn affine_invariance() {
        let xs = [0.2, 0.5, 0.9, 1.4, 2.0];
        let ys = [3.0, 2.0, 4.0, 5.0, 4.5];
        let (r0, _) = pearson(&xs, &ys).unwrap();
        let xs2: Vec<f64> = xs.iter().map(|x| 3.0 * x + 7.0).collect();
        let (r1, _) = pearson(&xs2, &ys).unwrap();
        assert!((r0 - r1).abs() < 1e-12);
        let (s0, _) = spearman(&xs, &ys).unwrap();
        let xs3: Vec<f64> = xs.iter().map(|x| x.exp()).collect(); // strictly monotone
        let (s1, _) = spearman(&xs3, &ys).unwrap();
        assert_eq!(s0, s1);
    }

    #[test]
    fn report_assembles_all_fields() {
        let points: Vec<CorrelationPoint> = (0..6)
            .map(|i| CorrelationPoint {
                config_id: format!("c{i}"),
                lpips: 0.1 + 0.05 * i as f64,
                map_mean: 0.8 - 0.1 * i as f64,
                map_std: 0.01,
            })
            .collect();
        let report = correlation_report(points).unwrap();
        assert_eq!(report.n, 6);
        assert!(report.pearson_r < -0.99);
        assert!(report.spearman_rho == -1.0);
        assert!(report.fit_slope < 0.0);
        assert!(report.pearson_p < 0.05);
    }
}
