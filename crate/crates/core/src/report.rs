//! Plain-text and CSV renderings of fits and study summaries.

use std::fmt::Write as _;
use std::io::Write;

use crate::error::Result;
use crate::harness::StudySummary;
use crate::model::{smooth_term_test, FitResult};

fn p_value(p: f64) -> String {
    if p < 1e-4 {
        "<0.0001".into()
    } else {
        format!("{p:.4}")
    }
}

/// Coefficient table, penalized terms and variance components of a fit.
pub fn fit_report(fit: &FitResult, title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{title}");
    let _ = writeln!(s);
    let _ = writeln!(s, "A. parametric coefficients");
    let width = fit
        .coefficients
        .iter()
        .map(|c| c.name.len())
        .chain(fit.terms.iter().map(|t| t.name.len()))
        .chain(fit.varcomp.iter().map(|v| v.name.len()))
        .max()
        .unwrap_or(0)
        .max(24);
    let _ = writeln!(
        s,
        "{:<width$} {:>10} {:>10} {:>10} {:>10}",
        "", "Estimate", "Std. Error", "t-value", "p-value"
    );
    for c in &fit.coefficients {
        let _ = writeln!(
            s,
            "{:<width$} {:>10.4} {:>10.4} {:>10.4} {:>10}",
            c.name,
            c.estimate,
            c.se,
            c.statistic,
            p_value(c.p)
        );
    }
    if !fit.terms.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "B. smooth terms (approximate tests)");
        let _ = writeln!(
            s,
            "{:<width$} {:>10} {:>10} {:>10}",
            "", "edf", "F-value", "p-value"
        );
        for (i, t) in fit.terms.iter().enumerate() {
            let test = smooth_term_test(fit, i).ok().filter(|t| t.applicable());
            let (stat, p) = match test {
                Some(t) => (
                    format!("{:.4}", t.statistic.unwrap_or(f64::NAN)),
                    p_value(t.p.unwrap_or(f64::NAN)),
                ),
                None => ("-".into(), "-".into()),
            };
            let _ = writeln!(
                s,
                "{:<width$} {:>10.4} {:>10} {:>10}",
                t.name, fit.edf[i].edf, stat, p
            );
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "C. variance components (standard deviations)");
    let _ = writeln!(
        s,
        "{:<width$} {:>10} {:>10} {:>10}",
        "", "Std.Dev.", "lower", "upper"
    );
    for v in &fit.varcomp {
        let (lo, hi) = v.ci.map_or(("-".into(), "-".into()), |(a, b)| {
            (format!("{a:.4}"), format!("{b:.4}"))
        });
        let flag = if v.boundary { "  (boundary)" } else { "" };
        let _ = writeln!(
            s,
            "{:<width$} {:>10.4} {:>10} {:>10}{flag}",
            v.name, v.sd, lo, hi
        );
    }
    for (name, r) in &fit.correlations {
        let _ = writeln!(s, "correlation within {name}: {r:.4}");
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "REML = {:.4}   conditional AIC (surrogate) = {:.4}   total edf = {:.4}   n = {}",
        fit.reml, fit.aic, fit.total_edf, fit.n
    );
    for w in &fit.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}

/// Aligned study table: per model, coefficient means, rejection counts
/// and variances, then mean standard-deviation estimates.
pub fn study_table(summary: &StudySummary) -> String {
    let mut s = String::new();
    let kind = if summary.null_mode { "Type-I" } else { "power" };
    let _ = writeln!(
        s,
        "{} study, generator {}, {} replicates, base seed {}",
        kind, summary.generator, summary.n_reps, summary.base_seed
    );
    let _ = writeln!(s);
    let mut header = format!("{:<8} {:<32} {:>10}", "model", "coefficient", "mean");
    for a in &summary.alphas {
        let _ = write!(header, " {:>10}", format!("sig@{a}"));
    }
    let _ = write!(header, " {:>10} {:>6}", "variance", "n_ok");
    let _ = writeln!(s, "{header}");
    for c in &summary.coefs {
        let mut line = format!("{:<8} {:<32} {:>10.4}", c.model.name(), c.coef, c.mean);
        for n in &c.n_significant {
            let _ = write!(line, " {:>10}", n);
        }
        let _ = write!(line, " {:>10.4} {:>6}", c.variance, c.n_ok);
        let _ = writeln!(s, "{line}");
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<8} {:<32} {:>10}",
        "model", "standard deviation", "mean"
    );
    for sd in &summary.sds {
        let _ = writeln!(
            s,
            "{:<8} {:<32} {:>10.4}",
            sd.model.name(),
            sd.name,
            sd.mean
        );
    }
    let _ = writeln!(s);
    for (m, f) in summary.models.iter().zip(&summary.failures) {
        let _ = writeln!(s, "{:<8} failed fits: {f}", m.name());
    }
    s
}

/// Long-format CSV of a study summary. Coefficient rows carry the mean,
/// variance and rejection counts; standard-deviation rows only the mean.
pub fn write_study_csv<W: Write>(summary: &StudySummary, mut out: W) -> Result<()> {
    let mut header = String::from("model,kind,name,mean,variance,n_ok");
    for a in &summary.alphas {
        let _ = write!(header, ",n_sig_{a}");
    }
    header.push_str(",failures");
    writeln!(out, "{header}")?;
    for (mi, &m) in summary.models.iter().enumerate() {
        let failures = summary.failures[mi];
        for c in summary.coefs.iter().filter(|c| c.model == m) {
            let mut line = format!("{},coef,{},{},{},{}", m, c.coef, c.mean, c.variance, c.n_ok);
            for n in &c.n_significant {
                let _ = write!(line, ",{n}");
            }
            let _ = write!(line, ",{failures}");
            writeln!(out, "{line}")?;
        }
        for sd in summary.sds.iter().filter(|s| s.model == m) {
            let blanks = ",".repeat(summary.alphas.len());
            writeln!(
                out,
                "{},sd,{},{},,{}{blanks},{failures}",
                m,
                sd.name,
                sd.mean,
                summary.n_reps - failures
            )?;
        }
    }
    Ok(())
}

/// Two-column `lag,value` CSV.
pub fn write_acf_csv<W: Write>(values: &[f64], mut out: W) -> Result<()> {
    writeln!(out, "lag,value")?;
    for (k, v) in values.iter().enumerate() {
        writeln!(out, "{k},{v}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{run_study, GeneratorKind, ModelVariant, StudyConfig};
    use crate::model::{assemble, fit_reml, FixedTerms, GroupFactor, ModelSpec, RandomTermSpec};

    #[test]
    fn fit_report_layout() {
        let data = crate::model::testutil::noisy_data(6, 30, 3);
        let spec = ModelSpec {
            fixed: FixedTerms::main_effects(),
            random: vec![RandomTermSpec::intercept(GroupFactor::Subject)],
            smooths: vec![],
        };
        let fit = fit_reml(&assemble(&spec, &data).unwrap()).unwrap();
        let r = fit_report(&fit, "test");
        assert!(r.contains("A. parametric coefficients"));
        assert!(r.contains("Factor_BetweenY"));
        assert!(r.contains("(1|Subject)"));
        assert!(r.contains("Residual"));
    }

    #[test]
    fn study_outputs() {
        let mut cfg = StudyConfig::new(GeneratorKind::AmpAbs, vec![ModelVariant::LmmMin], 3);
        cfg.params.n_subjects = 6;
        cfg.params.n_trials = 20;
        let s = run_study(&cfg).unwrap();
        let mut buf = Vec::new();
        write_study_csv(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "model,kind,name,mean,variance,n_ok,n_sig_0.05,n_sig_0.01,failures"
        );
        let cols = lines[0].split(',').count();
        assert!(lines.iter().all(|l| l.split(',').count() == cols));
        assert!(study_table(&s).contains("LMMmin"));
    }

    #[test]
    fn acf_csv() {
        let mut buf = Vec::new();
        write_acf_csv(&[1.0, 0.5], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "lag,value\n0,1\n1,0.5\n");
    }
}
