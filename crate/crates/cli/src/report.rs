//! Text tables and tidy figure-data CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};

use cropclm::agronomy::{requirements, Requirement, TransitionTime};
use cropclm::dataset::{format_percent, ProgressPanel, ProgressRecord};
use cropclm::estimation::{FittedModel, PredictedProgress, WaldRow};
use cropclm::mixed::FittedMixedModel;

use crate::artifact::ModelArtifact;
use crate::commands::CvArtifact;

fn wald_table(out: &mut String, rows: &[WaldRow]) {
    let width = rows.iter().map(|r| r.name.chars().count()).max().unwrap_or(9).max(9);
    let _ = writeln!(out, "{:<width$}  {:>10}  {:>9}  {:>8}  {:>9}", "parameter", "estimate", "SE", "z", "p");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>10.4}  {:>9.4}  {:>8.2}  {:>9.2e} {}",
            r.name,
            r.estimate,
            r.se,
            r.z,
            r.p,
            r.marker()
        );
    }
}

pub fn fixed_summary(m: &FittedModel) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} {} {} on {} observations, {} seasons",
        m.spec.code(),
        m.spec.link,
        m.spec.family,
        m.n_obs,
        m.n_seasons
    );
    let _ = writeln!(
        s,
        "log-likelihood {:.6} after {} iterations (score norm {:.2e})",
        m.loglik(),
        m.convergence.iterations,
        m.convergence.grad_norm
    );
    for d in &m.convergence.diagnostics {
        let _ = writeln!(s, "note: {d}");
    }
    if m.grid_adjusted > 0 {
        let _ = writeln!(s, "note: {} rows rounded onto the 1/N grid", m.grid_adjusted);
    }
    s.push('\n');
    wald_table(&mut s, &m.wald);
    let _ = writeln!(s, "sandwich standard errors; ⋆ p < 0.001, • p < 0.05");
    s
}

pub fn mixed_summary(m: &FittedMixedModel) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} {} {} with random effects over {} seasons",
        m.spec.code(),
        m.spec.link,
        m.spec.family,
        m.seasons.len()
    );
    let _ = writeln!(s, "Laplace log-likelihood {:.6}", m.loglik);
    let _ = writeln!(s, "within-sample RMSE {:.4} (fixed effects only {:.4})", m.rmse, m.fixed_rmse);
    for d in &m.dropped {
        let _ = writeln!(s, "note: dropped random term {d} (variance collapsed)");
    }
    s.push('\n');
    wald_table(&mut s, &m.wald);
    let _ = writeln!(s, "{} standard errors; ⋆ p < 0.001, • p < 0.05", m.se_kind);
    s.push('\n');
    let _ = writeln!(s, "{:<20}  {:>9}  {:>9}", "random term", "SD", "SE");
    for c in &m.components {
        let _ = writeln!(s, "{:<20}  {:>9.4}  {:>9.4}", c.name, c.sd, c.se);
    }
    s
}

pub fn requirements_text(reqs: &[Requirement]) -> String {
    let mut s = String::new();
    if reqs.is_empty() {
        s.push_str("no requirements: fewer than two free stages\n");
        return s;
    }
    let _ = writeln!(s, "{:<32}  {:>10}  {:>10}", "transition", "delta", "|delta|");
    for r in reqs {
        let _ = writeln!(s, "{:<32}  {:>10.4}  {:>10.4}", format!("{} -> {}", r.from, r.to), r.delta, r.magnitude);
    }
    s
}

pub fn transition_text(t: &TransitionTime) -> String {
    let mut s = format!("stage {}: {:.3} {}\n", t.stage, t.days, t.unit);
    let _ = writeln!(s, "requirement {:.4}; rates {:.6} per day, {:.6} per GDD", t.magnitude, t.rates.calendar, t.rates.thermal);
    s
}

pub fn model_text(model: &ModelArtifact) -> Result<String> {
    let (mut s, reqs) = match model {
        ModelArtifact::Fixed(m) => (fixed_summary(m), requirements(m.as_ref(), None)?),
        ModelArtifact::Mixed(m) => (mixed_summary(m), requirements(m.as_ref(), None)?),
    };
    s.push('\n');
    s.push_str(&requirements_text(&reqs));
    Ok(s)
}

pub fn cv_text(cv: &CvArtifact) -> String {
    let mut s = String::new();
    match cv {
        CvArtifact::Single { report } => {
            let _ = writeln!(
                s,
                "{}: cross-validated error {:.3}% over {} replicates ({} train / {} test seasons{})",
                report.code,
                report.average,
                report.replicates,
                report.train_size,
                report.test_size,
                if report.exhaustive { ", exhaustive" } else { "" }
            );
            for (label, series) in report.stages.iter().zip(&report.per_stage) {
                let mean = series.iter().sum::<f64>() / series.len().max(1) as f64;
                let _ = writeln!(s, "  {label:<20} {mean:>8.3}%");
            }
            for w in &report.warnings {
                let _ = writeln!(s, "note: {w}");
            }
        }
        CvArtifact::Grid { setting, rows } => {
            let _ = writeln!(s, "model selection, {setting} setting (sorted by average error)");
            let _ = writeln!(s, "{:<6}  {:<8}  {:>9}", "code", "link", "error %");
            for r in rows {
                let avg = r.average.map(|a| format!("{a:.3}")).unwrap_or_else(|| "failed".into());
                let _ = writeln!(s, "{:<6}  {:<8}  {:>9}", r.code, r.link, avg);
            }
        }
    }
    s
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

pub fn write_estimates(path: &Path, rows: &[WaldRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["parameter", "estimate", "se", "z", "p"])?;
    for r in rows {
        w.write_record([r.name.clone(), r.estimate.to_string(), r.se.to_string(), r.z.to_string(), r.p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_requirements(path: &Path, reqs: &[Requirement]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["from", "to", "delta", "magnitude"])?;
    for r in reqs {
        w.write_record([r.from.clone(), r.to.clone(), r.delta.to_string(), r.magnitude.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Long format: one row per (model, day, series). The pooled series is
/// labelled `all`.
pub fn write_cv_series(path: &Path, cv: &CvArtifact) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["code", "day", "series", "error_percent"])?;
    let reports: Vec<_> = match cv {
        CvArtifact::Single { report } => vec![report],
        CvArtifact::Grid { rows, .. } => rows.iter().filter_map(|r| r.report.as_ref()).collect(),
    };
    for rep in reports {
        for (j, day) in rep.days.iter().enumerate() {
            w.write_record([rep.code.clone(), day.to_string(), "all".into(), rep.r_hat[j].to_string()])?;
            for (label, series) in rep.stages.iter().zip(&rep.per_stage) {
                w.write_record([rep.code.clone(), day.to_string(), label.clone(), series[j].to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_grid(path: &Path, cv: &CvArtifact) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["rank", "code", "link", "effects", "error_percent", "failure"])?;
    if let CvArtifact::Grid { rows, .. } = cv {
        for (i, r) in rows.iter().enumerate() {
            let effects: Vec<String> = r.effects.iter().map(|e| format!("{e:?}").to_lowercase()).collect();
            w.write_record([
                (i + 1).to_string(),
                r.code.clone(),
                r.link.to_string(),
                effects.join(" "),
                r.average.map(|a| a.to_string()).unwrap_or_default(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Long format: one row per (season, day, stage) with predicted and, where
/// surveyed, observed percentages.
pub fn write_curves(path: &Path, pred: &PredictedProgress, observed: Option<&ProgressPanel>) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["season", "day", "stage", "predicted", "observed"])?;
    let lookup: BTreeMap<(i32, u32), &ProgressRecord> = observed
        .map(|p| p.records().iter().map(|r| ((r.season, r.day), r)).collect())
        .unwrap_or_default();
    for r in &pred.rows {
        let obs = lookup.get(&(r.season, r.day));
        for (c, label) in pred.stages.iter().enumerate() {
            w.write_record([
                r.season.to_string(),
                r.day.to_string(),
                label.clone(),
                format_percent(r.m[c + 1]),
                obs.map(|o| format_percent(o.y[c + 1])).unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
