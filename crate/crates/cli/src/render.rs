//! Plain-text tables for terminal output.

use std::fmt::Write;

use smm_core::late::LateDecomposition;
use smm_core::report::FitReport;
use smm_core::simulate::McSummary;

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

pub fn fit_table(r: &FitReport) -> String {
    let mut s = String::new();
    let steps = if r.steps == 1 { "one-step" } else { "two-step" };
    let _ = writeln!(s, "model: {} ({}), {steps}, n = {}", r.model, r.moment_system, r.n);
    if r.provenance.dropped_rows > 0 {
        let _ = writeln!(s, "dropped rows with missing values: {}", r.provenance.dropped_rows);
    }
    if let Some(groups) = &r.provenance.merged_levels {
        let merged: Vec<String> = groups.iter().filter(|g| g.len() > 1).map(|g| format!("{g:?}")).collect();
        let _ = writeln!(s, "merged instrument levels: {}", merged.join(", "));
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<18} {:>11} {:>10} {:>24}", "parameter", "estimate", "se", "95% CI");
    for e in &r.estimates {
        let _ = writeln!(
            s,
            "{:<18} {:>11.4} {:>10.4} {:>24}",
            e.name,
            e.estimate,
            e.se,
            format!("[{:.4}, {:.4}]", e.ci_low, e.ci_high)
        );
        if let Some(x) = &e.exp {
            let _ = writeln!(
                s,
                "{:<18} {:>11.4} {:>10} {:>24}",
                format!("  exp({})", e.name),
                x.estimate,
                "",
                format!("[{:.4}, {:.4}]", x.ci_low, x.ci_high)
            );
        }
    }
    if let Some(a) = r.derived_alpha0 {
        let _ = writeln!(s, "{:<18} {:>11.4}", "alpha0 (derived)", a);
    }
    let _ = writeln!(s);
    match (r.j_statistic, r.j_df, r.j_p_value) {
        (Some(j), Some(df), Some(p)) => {
            let _ = writeln!(s, "J = {j:.4} on {df} df, p = {p:.4}");
        }
        _ => {
            let _ = writeln!(s, "J test: not available");
        }
    }
    let c = &r.convergence;
    let status = if c.converged { "converged" } else { "NOT converged" };
    let _ = writeln!(s, "{status} after {} iterations (objective {:.3e})", c.iterations, c.objective);
    if let Some(note) = &r.se_note {
        let _ = writeln!(s, "note: {note}");
    }
    s
}

pub fn simulation_table(m: &McSummary) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "design {} / {} ({}-step), n = {}, reps = {}, seed = {}",
        m.design, m.estimator, m.steps, m.n, m.reps, m.seed
    );
    let _ = writeln!(s, "used {} replications ({} not converged, {} failed)", m.used, m.not_converged, m.failed);
    if m.unreliable {
        let _ = writeln!(s, "warning: more than 1% of replications lost; summary is unreliable");
    }
    for (msg, count) in &m.failures {
        let _ = writeln!(s, "  {count} x {msg}");
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<18} {:>11} {:>10} {:>10}", "parameter", "mean", "sd", "mean se");
    for p in &m.parameters {
        let _ = writeln!(s, "{:<18} {:>11.4} {:>10} {:>10}", p.name, p.mean, opt(p.sd), opt(p.mean_se));
    }
    if let Some(j) = &m.j_test {
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "J ({} df): mean {:.4}, variance {}, rejection rate at 5% {:.3}",
            j.df,
            j.mean,
            opt(j.variance),
            j.reject_rate_5pct
        );
    }
    s
}

pub fn decomposition_table(d: &LateDecomposition) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "form: {}", d.form.name());
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<16} {:>11} {:>10}", "increment", "estimate", "weight");
    for (k, (e, w)) in d.adjacent_estimates.iter().zip(&d.weights).enumerate() {
        let label = format!("{} -> {}", d.level_values[k], d.level_values[k + 1]);
        let _ = writeln!(s, "{label:<16} {e:>11.4} {w:>10.4}");
    }
    let _ = writeln!(s, "{:<16} {:>11.4}", "weighted average", d.weighted_average);
    if let (Some(est), Some(lw)) = (&d.reference_estimates, &d.lambda_weights) {
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<16} {:>11} {:>10}", "vs lowest", "estimate", "weight");
        for (k, (e, w)) in est.iter().zip(lw).enumerate() {
            let label = format!("{} -> {}", d.level_values[0], d.level_values[k + 1]);
            let _ = writeln!(s, "{label:<16} {e:>11.4} {w:>10.4}");
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "monotone exposure: {}", if d.monotonicity_ok { "yes" } else { "NO" });
    let _ = writeln!(s, "weights in [0, 1]: {}", if d.weights_valid { "yes" } else { "NO" });
    if let Some(v) = d.lambda_valid {
        let _ = writeln!(s, "reference weights convex: {}", if v { "yes" } else { "NO" });
    }
    s
}
