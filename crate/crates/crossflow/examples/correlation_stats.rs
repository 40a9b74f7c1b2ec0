//! Correlation toolbox on synthetic study points: Pearson and Spearman with
//! t-distribution p-values, exact small-sample permutation, and the
//! least-squares fit.

use crossflow::stats::{
    correlation_report, linear_fit, pearson, pearson_p_value, spearman, spearman_exact,
    student_t_sf, CorrelationPoint,
};

fn main() -> crossflow::Result<()> {
    // fifteen sweep-like points with a strong negative trend plus noise
    let lpips: Vec<f64> = (0..15).map(|i| 0.12 + 0.015 * i as f64).collect();
    let map: Vec<f64> = lpips
        .iter()
        .enumerate()
        .map(|(i, l)| 0.62 - 1.8 * l + 0.01 * ((i * 7 % 5) as f64 - 2.0))
        .collect();

    let (r, p) = pearson(&lpips, &map)?;
    let (rho, rho_p) = spearman(&lpips, &map)?;
    let (slope, intercept) = linear_fit(&lpips, &map)?;
    println!("pearson  r   = {r:.3}  (p = {p:.2e})");
    println!("spearman rho = {rho:.3}  (p = {rho_p:.2e})");
    println!("least squares: mAP ~= {slope:.3} * LPIPS + {intercept:.3}");

    // the p-values the t-route reproduces at n = 15
    println!("p(r = -0.85, n = 15) = {:.3e}", pearson_p_value(-0.85, 15)?);
    println!("p(r = -0.68, n = 15) = {:.3e}", pearson_p_value(-0.68, 15)?);

    // survival function anchors
    println!("t-sf(0, df=13)   = {}", student_t_sf(0.0, 13.0));
    println!("t-sf(1, df=1)    = {} (Cauchy quartile 0.25)", student_t_sf(1.0, 1.0));

    // exact permutation route for small n
    let xs = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let ys = [2.0, 1.0, 4.0, 3.0, 6.0, 5.0];
    let (rho_small, p_exact) = spearman_exact(&xs, &ys)?;
    let (_, p_approx) = spearman(&xs, &ys)?;
    println!("n=6 fixture: rho {rho_small:.3}, exact p {p_exact:.4} vs t-approx p {p_approx:.4}");

    // full report shape used by the pipeline
    let points: Vec<CorrelationPoint> = lpips
        .iter()
        .zip(map.iter())
        .enumerate()
        .map(|(i, (l, m))| CorrelationPoint {
            config_id: format!("cfg{i}"),
            lpips: *l,
            map_mean: *m,
            map_std: 0.01,
        })
        .collect();
    let report = correlation_report(points)?;
    println!("report: n = {}, fit slope {:.3}", report.n, report.fit_slope);
    Ok(())
}
