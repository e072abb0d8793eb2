//! Classification-report tables (per class, then accuracy / macro / weighted)
//! and trial summaries. Works from serialized artifacts only.

use std::path::Path;

use hypergcn::tuner::Trial;

use crate::artifacts::MetricsFile;

struct Row {
    label: String,
    precision: Option<f64>,
    recall: Option<f64>,
    f1: f64,
    support: usize,
}

fn rows(m: &MetricsFile) -> Vec<Row> {
    let total = m.n_samples;
    let mut out: Vec<Row> = m
        .class_names
        .iter()
        .zip(&m.metrics.per_class)
        .map(|(name, c)| Row {
            label: name.clone(),
            precision: Some(c.precision),
            recall: Some(c.recall),
            f1: c.f1,
            support: c.support,
        })
        .collect();
    let mm = &m.metrics;
    out.push(Row { label: "accuracy".into(), precision: None, recall: None, f1: mm.accuracy, support: total });
    out.push(Row {
        label: "macro avg".into(),
        precision: Some(mm.macro_precision),
        recall: Some(mm.macro_recall),
        f1: mm.macro_f1,
        support: total,
    });
    out.push(Row {
        label: "weighted avg".into(),
        precision: Some(mm.weighted_precision),
        recall: Some(mm.weighted_recall),
        f1: mm.weighted_f1,
        support: total,
    });
    out
}

/// Aligned plain-text table, four decimals.
pub fn text(m: &MetricsFile) -> String {
    let rows = rows(m);
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(12);
    let mut s = format!("{} ({}, n={})\n\n", m.model, m.split, m.n_samples);
    s += &format!("{:>width$}  {:>9}  {:>9}  {:>9}  {:>7}\n", "", "precision", "recall", "f1-score", "support");
    let n_classes = m.class_names.len();
    for (i, r) in rows.iter().enumerate() {
        if i == n_classes {
            s.push('\n');
        }
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        s += &format!(
            "{:>width$}  {:>9}  {:>9}  {:>9.4}  {:>7}\n",
            r.label,
            opt(r.precision),
            opt(r.recall),
            r.f1,
            r.support
        );
    }
    s
}

pub fn write_csv(metrics: &[MetricsFile], path: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "split", "row", "precision", "recall", "f1_score", "support"])?;
    for m in metrics {
        for r in rows(m) {
            let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            w.write_record([
                m.model.clone(),
                m.split.clone(),
                r.label,
                opt(r.precision),
                opt(r.recall),
                r.f1.to_string(),
                r.support.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One summary row per trial, plus each trial's validation-loss curve.
pub fn write_ledger_tables(trials: &[Trial], summary: &Path, curves: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(summary)?;
    w.write_record(["trial", "status", "accuracy", "weighted_f1", "val_loss", "val_loss_std", "best_epoch", "epochs"])?;
    for t in trials {
        let k = t.keys;
        let f = |g: fn(&hypergcn::tuner::TrialKeys) -> f64| k.as_ref().map(|k| g(k).to_string()).unwrap_or_default();
        w.write_record([
            t.id.to_string(),
            format!("{:?}", t.status).to_lowercase(),
            f(|k| k.accuracy),
            f(|k| k.weighted_f1),
            f(|k| k.val_loss),
            f(|k| k.val_loss_std),
            t.best_epoch.to_string(),
            t.val_loss_curve.len().to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(curves)?;
    w.write_record(["trial", "epoch", "val_loss"])?;
    for t in trials {
        for (e, v) in t.val_loss_curve.iter().enumerate() {
            w.write_record([t.id.to_string(), (e + 1).to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
