use std::fmt::Write as _;

use super::{ReliabilityReport, Statistic, SweepRow};

pub const REPORT_CSV: &str = "report.csv";
pub const RISK_COVERAGE_CSV: &str = "risk_coverage.csv";
pub const RISK_COVERAGE_SVG: &str = "risk_coverage.svg";
pub const SWEEP_CSV: &str = "sweep.csv";

/// Six significant digits, `.` as decimal point, no exponent for ordinary
/// magnitudes.
pub fn format_sig6(x: f64) -> String {
    if !x.is_finite() {
        return "NA".into();
    }
    if x == 0.0 {
        return "0".into();
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

fn stat(s: Statistic) -> String {
    s.value().map_or_else(|| "NA".into(), format_sig6)
}

/// One row per uncertainty kind. `risk_at_0.1_mm` is `NA` when the curve
/// has no point at coverage 0.1.
pub fn report_csv(report: &ReliabilityReport) -> String {
    let mut out = String::from(
        "kind,frames,mean_error_mm,spearman_rho,risk_at_0.1_mm,outlier_threshold_mm,outlier_prevalence,roc_auc,pr_auc,error_reference\n",
    );
    for k in &report.kinds {
        let risk = k
            .curve
            .iter()
            .find(|p| p.coverage == 0.1)
            .map_or_else(|| "NA".into(), |p| format_sig6(p.risk_mm));
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            k.kind,
            report.frames,
            format_sig6(report.mean_error_mm),
            stat(k.spearman_rho),
            risk,
            format_sig6(k.outliers.threshold_mm),
            format_sig6(k.outliers.prevalence),
            stat(k.outliers.roc_auc),
            stat(k.outliers.pr_auc),
            report.error_reference,
        );
    }
    out
}

pub fn risk_coverage_csv(report: &ReliabilityReport) -> String {
    let mut out = String::from("kind,coverage,risk_mm\n");
    for k in &report.kinds {
        for p in &k.curve {
            let _ = writeln!(out, "{},{},{}", k.kind, format_sig6(p.coverage), format_sig6(p.risk_mm));
        }
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("sigma_mm,mean_error_mm,spearman_rho,roc_auc\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            format_sig6(r.sigma_mm),
            format_sig6(r.mean_error_mm),
            stat(r.spearman_rho),
            stat(r.roc_auc)
        );
    }
    out
}

/// Rounds `max` up to 1, 2 or 5 times a power of ten.
fn nice_ceiling(max: f64) -> f64 {
    if max <= 0.0 {
        return 1.0;
    }
    let p = 10f64.powf(max.log10().floor());
    [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * p)
        .find(|&v| v >= max)
        .unwrap_or(10.0 * p)
}

/// Risk against coverage, one polyline per kind.
pub fn render_risk_coverage_svg(report: &ReliabilityReport) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const LEFT: f64 = 70.0;
    const RIGHT: f64 = 20.0;
    const TOP: f64 = 20.0;
    const BOTTOM: f64 = 60.0;
    const COLORS: [&str; 3] = ["#1f77b4", "#d62728", "#2ca02c"];
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let max_risk = report
        .kinds
        .iter()
        .flat_map(|k| k.curve.iter().map(|p| p.risk_mm))
        .fold(0.0, f64::max);
    let y_max = nice_ceiling(max_risk);
    let x = |c: f64| LEFT + c * pw;
    let y = |r: f64| TOP + ph - r / y_max * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{l} {t} V{b} H{r}" fill="none" stroke="black"/>"#,
        l = LEFT,
        t = TOP,
        b = TOP + ph,
        r = LEFT + pw
    );
    for i in 0..=5 {
        let c = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<line x1="{px}" y1="{b}" x2="{px}" y2="{b2}" stroke="black"/><text x="{px}" y="{ty}" text-anchor="middle">{c}</text>"#,
            px = x(c),
            b = TOP + ph,
            b2 = TOP + ph + 5.0,
            ty = TOP + ph + 18.0,
        );
        let r = y_max * c;
        let _ = writeln!(
            s,
            r#"<line x1="{l2}" y1="{py}" x2="{l}" y2="{py}" stroke="black"/><text x="{tx}" y="{ty}" text-anchor="end">{label}</text>"#,
            l = LEFT,
            l2 = LEFT - 5.0,
            py = y(r),
            tx = LEFT - 8.0,
            ty = y(r) + 4.0,
            label = format_sig6(r),
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{cx}" y="{by}" text-anchor="middle">coverage</text>"#,
        cx = LEFT + pw / 2.0,
        by = H - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{cy}" text-anchor="middle" transform="rotate(-90 18 {cy})">risk (mm)</text>"#,
        cy = TOP + ph / 2.0
    );
    for (i, k) in report.kinds.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = k
            .curve
            .iter()
            .map(|p| format!("{:.2},{:.2}", x(p.coverage), y(p.risk_mm)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            points.join(" ")
        );
        let ly = TOP + 15.0 + 16.0 * i as f64;
        let lx = LEFT + pw - 90.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{lx2}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{tx}" y="{ty}">{kind}</text>"#,
            lx2 = lx + 20.0,
            tx = lx + 26.0,
            ty = ly + 4.0,
            kind = k.kind,
        );
    }
    s.push_str("</svg>\n");
    s
}
