use std::fmt::Write;

use serde::Serialize;

use regime_cvar::backtest::{BacktestReport, Metrics};
use regime_cvar::Result;

use crate::commands::DiagnosticsBundle;

#[derive(Serialize)]
struct Row<'a> {
    strategy: &'a str,
    group: &'a str,
    total_cost: f64,
    #[serde(flatten)]
    metrics: &'a Metrics,
}

#[derive(Serialize)]
struct Summary<'a> {
    first_date: &'a str,
    last_date: &'a str,
    performance: Vec<Row<'a>>,
    diagnostics: &'a DiagnosticsBundle,
}

pub fn summary_json(report: &BacktestReport, diag: &DiagnosticsBundle) -> Result<String> {
    let s = Summary {
        first_date: report.dates.first().map(String::as_str).unwrap_or(""),
        last_date: report.dates.last().map(String::as_str).unwrap_or(""),
        performance: report
            .strategies
            .iter()
            .map(|s| Row {
                strategy: &s.name,
                group: &s.group,
                total_cost: s.total_cost,
                metrics: &s.metrics,
            })
            .collect(),
        diagnostics: diag,
    };
    Ok(serde_json::to_string_pretty(&s)?)
}

fn num(x: f64, digits: usize) -> String {
    if x.is_finite() {
        format!("{x:.digits$}")
    } else {
        "n/a".into()
    }
}

pub fn markdown(report: &BacktestReport, diag: &DiagnosticsBundle) -> String {
    let mut s = String::new();
    let first = report.dates.first().map(String::as_str).unwrap_or("?");
    let last = report.dates.last().map(String::as_str).unwrap_or("?");
    let _ = writeln!(s, "# Walk-forward summary\n\nTest window {first} to {last}, {} rows.\n", report.dates.len());

    let groups = [
        ("main", "Performance"),
        ("generator-baseline", "Generator baselines"),
        ("baseline", "Classical baselines"),
        ("ablation", "Ablations"),
        ("sweep", "Sensitivity"),
    ];
    for (group, title) in groups {
        let rows: Vec<_> = report.strategies.iter().filter(|x| x.group == group).collect();
        if rows.is_empty() {
            continue;
        }
        let _ = writeln!(s, "## {title}\n");
        let _ = writeln!(s, "| strategy | CAGR | vol | Sharpe | Sortino | max drawdown | Calmar | avg turnover | costs |");
        let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|");
        for st in rows {
            let m = &st.metrics;
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                st.name,
                num(m.cagr, 4),
                num(m.vol_annual, 4),
                num(m.sharpe, 3),
                num(m.sortino, 3),
                num(m.maxdd, 4),
                num(m.calmar, 3),
                num(m.avg_turnover, 4),
                num(st.total_cost, 6),
            );
        }
        s.push('\n');
    }

    if !diag.reports.is_empty() {
        let _ = writeln!(s, "## Scenario calibration\n");
        let _ = writeln!(s, "| generator | KS | ES | VS | LB p(abs r) | UC p | CVaR err (bps) |");
        let _ = writeln!(s, "|---|---|---|---|---|---|---|");
        for r in &diag.reports {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} |",
                r.label,
                num(r.ks_avg, 4),
                num(r.energy_score, 5),
                num(r.variogram_score, 6),
                num(r.ljung_box_p_absr, 3),
                num(r.kupiec_uc_p, 3),
                num(r.cvar_error_bps, 1),
            );
        }
    }

    if !diag.uplift.is_empty() {
        let _ = writeln!(s, "\n## Sharpe uplift\n");
        let _ = writeln!(s, "| reference | baseline | delta | 95% CI | p |");
        let _ = writeln!(s, "|---|---|---|---|---|");
        for u in &diag.uplift {
            let x = &u.uplift;
            let _ = writeln!(
                s,
                "| {} | {} | {} | [{}, {}] | {} |",
                u.reference,
                u.baseline,
                num(x.delta, 3),
                num(x.lo, 3),
                num(x.hi, 3),
                num(x.p_value, 3)
            );
        }
    }

    let notes: Vec<&String> = report.notes.iter().chain(&diag.notes).collect();
    if !notes.is_empty() {
        let _ = writeln!(s, "\n## Notes\n");
        for n in notes {
            let _ = writeln!(s, "- {n}");
        }
    }
    s
}
