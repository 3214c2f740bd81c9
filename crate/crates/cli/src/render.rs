use std::fmt::Write;

use lasso_ate::diagnostics::DiagnosticsReport;
use lasso_ate::estimators::AteReport;
use lasso_ate::sim::MonteCarloSummary;

fn count(v: Option<usize>) -> String {
    v.map_or("-".into(), |c| c.to_string())
}

fn mean(v: Option<f64>) -> String {
    v.map_or("-".into(), |c| format!("{c:.1}"))
}

pub fn estimates(reports: &[AteReport], failures: &[(String, String)]) -> String {
    let mut out = String::new();
    let level = reports.first().map_or(0.95, |r| r.ci_level);
    let ci = format!("{:.0}% CI", 100.0 * level);
    writeln!(
        out,
        "{:<15} {:>10} {:>10} {:>23} {:>9} {:>9}",
        "method", "ATE", "sd(ATE)", ci, "sel(T)", "sel(C)"
    )
    .unwrap();
    for r in reports {
        writeln!(
            out,
            "{:<15} {:>10.4} {:>10.4} {:>23} {:>9} {:>9}",
            r.method.label(),
            r.estimate,
            r.std_error,
            format!("[{:.4}, {:.4}]", r.ci.0, r.ci.1),
            count(r.selected_treated),
            count(r.selected_control)
        )
        .unwrap();
    }
    for (m, e) in failures {
        writeln!(out, "{m:<15} failed: {e}").unwrap();
    }
    out
}

pub fn simulation(summary: &MonteCarloSummary) -> String {
    let mut out = String::new();
    writeln!(out, "true ATE {:.6}, {} replications", summary.true_ate, summary.replications).unwrap();
    writeln!(
        out,
        "{:<15} {:>9} {:>9} {:>9} {:>9} {:>9} {:>8} {:>8} {:>6}",
        "method", "bias", "SD", "RMSE", "coverage", "length", "sel(T)", "sel(C)", "fail"
    )
    .unwrap();
    for m in &summary.methods {
        let s = &m.stats;
        writeln!(
            out,
            "{:<15} {:>9.4} {:>9.4} {:>9.4} {:>9.3} {:>9.4} {:>8} {:>8} {:>6}",
            m.method.label(),
            s.bias,
            s.sd,
            s.rmse,
            s.coverage,
            s.mean_ci_length,
            mean(s.mean_selected_treated),
            mean(s.mean_selected_control),
            m.failures
        )
        .unwrap();
    }
    out
}

pub fn diagnostics(report: &DiagnosticsReport, names: &[String]) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "n = {} (treated {}, control {}), p = {}, estimated support size {}",
        report.n, report.n_treated, report.n_control, report.p, report.support_size
    )
    .unwrap();
    if !report.estimated_support.is_empty() {
        let selected: Vec<&str> = report.estimated_support.iter().map(|&j| names[j].as_str()).collect();
        writeln!(out, "support: {}", selected.join(", ")).unwrap();
    }
    writeln!(out, "{:<18} {:<28} {:>12} {:>10} {:>6}", "condition", "quantity", "value", "threshold", "status").unwrap();
    for c in &report.checks {
        let status = serde_json::to_value(c.status).unwrap();
        writeln!(
            out,
            "{:<18} {:<28} {:>12.4} {:>10.4} {:>6}",
            c.condition,
            c.quantity,
            c.value,
            c.threshold,
            status.as_str().unwrap_or("")
        )
        .unwrap();
    }
    for j in &report.flagged_fourth_moment_columns {
        writeln!(out, "FLAG fourth moment {}: {:.2}", names[*j], report.fourth_moments[*j]).unwrap();
    }
    for ne in &report.not_estimable {
        writeln!(out, "not estimable {}: {}", ne.constant, ne.reason).unwrap();
    }
    out
}
