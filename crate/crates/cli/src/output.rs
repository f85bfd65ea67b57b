//! CSV writers. Column layouts are documented in the README.

use std::path::{Path, PathBuf};

use amil_core::metrics::Histogram;
use amil_core::report::InstanceScore;
use amil_core::{CvReport, EpochRecord, MeanStd, ScoreHistogram, ScoreReport};
use anyhow::Context;

use crate::config::usage;

/// Output directory that refuses to overwrite any input of the run and
/// remembers what it wrote.
pub struct OutDir {
    dir: PathBuf,
    inputs: Vec<PathBuf>,
    written: Vec<String>,
}

impl OutDir {
    pub fn create(dir: &Path, inputs: &[&Path]) -> anyhow::Result<OutDir> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let inputs = inputs
            .iter()
            .filter_map(|p| std::fs::canonicalize(p).ok())
            .collect();
        Ok(OutDir {
            dir: dir.to_path_buf(),
            inputs,
            written: Vec::new(),
        })
    }

    pub fn path(&mut self, name: &str) -> anyhow::Result<PathBuf> {
        let path = self.dir.join(name);
        if let Ok(canon) = std::fs::canonicalize(&path) {
            if self.inputs.contains(&canon) {
                return Err(usage(format!(
                    "output {} would overwrite an input file",
                    path.display()
                )));
            }
        }
        self.written.push(name.to_string());
        Ok(path)
    }

    pub fn written(&self) -> Vec<String> {
        self.written.clone()
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> anyhow::Result<()> {
        let path = self.path(name)?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn write_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        self.write_text(name, &(text + "\n"))
    }

    pub fn csv(&mut self, name: &str) -> anyhow::Result<csv::Writer<std::fs::File>> {
        let path = self.path(name)?;
        csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mean_std(v: Option<MeanStd>) -> [String; 2] {
    match v {
        Some(m) => [m.mean.to_string(), m.std.to_string()],
        None => [String::new(), String::new()],
    }
}

pub fn write_epochs(out: &mut OutDir, name: &str, records: &[EpochRecord]) -> anyhow::Result<()> {
    let mut w = out.csv(name)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per variant: mean and population std over repeats.
pub fn write_ablation(out: &mut OutDir, name: &str, reports: &[CvReport]) -> anyhow::Result<()> {
    let mut w = out.csv(name)?;
    w.write_record([
        "variant",
        "accuracy_mean",
        "accuracy_std",
        "macro_f1_mean",
        "macro_f1_std",
        "macro_auroc_mean",
        "macro_auroc_std",
        "macro_auprc_mean",
        "macro_auprc_std",
    ])?;
    for r in reports {
        let s = &r.summary;
        let mut row = vec![r.variant.name().to_string()];
        row.extend(mean_std(Some(s.accuracy)));
        row.extend(mean_std(Some(s.macro_f1)));
        row.extend(mean_std(s.macro_auroc));
        row.extend(mean_std(s.macro_auprc));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_folds(out: &mut OutDir, name: &str, reports: &[CvReport]) -> anyhow::Result<()> {
    let mut w = out.csv(name)?;
    w.write_record([
        "variant",
        "repeat",
        "fold",
        "n_bags",
        "accuracy",
        "macro_f1",
        "macro_auroc",
        "macro_auprc",
    ])?;
    for r in reports {
        for (repeat, fold, e) in &r.per_fold {
            w.write_record([
                r.variant.name().to_string(),
                repeat.to_string(),
                fold.to_string(),
                e.n_bags.to_string(),
                e.accuracy.to_string(),
                e.macro_f1.to_string(),
                opt(e.macro_auroc),
                opt(e.macro_auprc),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_bags(out: &mut OutDir, name: &str, report: &ScoreReport, n_classes: usize) -> anyhow::Result<()> {
    let mut w = out.csv(name)?;
    let mut header = vec!["bag_id".to_string(), "label".into(), "predicted".into()];
    header.extend((0..n_classes).map(|c| format!("logit_{c}")));
    w.write_record(&header)?;
    for b in &report.bags {
        let mut row = vec![b.bag_id.clone(), b.label.to_string(), b.predicted.to_string()];
        row.extend(b.logits.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Instance rows; `set` labels which part of an experiment a row belongs
/// to and is omitted when `None`.
pub fn write_instances<'a>(
    out: &mut OutDir,
    name: &str,
    rows: impl IntoIterator<Item = (&'a InstanceScore, Option<&'a str>)>,
    with_set: bool,
) -> anyhow::Result<()> {
    let mut w = out.csv(name)?;
    let mut header = vec!["bag_id", "label", "index", "attention", "anomaly", "pooling", "anomalous"];
    if with_set {
        header.push("set");
    }
    w.write_record(&header)?;
    for (i, set) in rows {
        let mut row = vec![
            i.bag_id.clone(),
            i.label.to_string(),
            i.index.to_string(),
            i.attention.to_string(),
            i.anomaly.to_string(),
            i.pooling.to_string(),
            i.anomalous.map(|a| a.to_string()).unwrap_or_default(),
        ];
        if with_set {
            row.push(set.unwrap_or_default().to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn histogram_rows(w: &mut csv::Writer<std::fs::File>, score: &str, h: &Histogram) -> anyhow::Result<()> {
    for (class, counts) in h.counts.iter().enumerate() {
        for (bin, count) in counts.iter().enumerate() {
            w.write_record([
                score.to_string(),
                class.to_string(),
                bin.to_string(),
                h.edges[bin].to_string(),
                h.edges[bin + 1].to_string(),
                count.to_string(),
            ])?;
        }
    }
    Ok(())
}

pub fn write_histograms(out: &mut OutDir, name: &str, h: &ScoreHistogram) -> anyhow::Result<()> {
    let mut w = out.csv(name)?;
    w.write_record(["score", "class", "bin", "lower", "upper", "count"])?;
    histogram_rows(&mut w, "attention", &h.attention)?;
    histogram_rows(&mut w, "anomaly", &h.anomaly)?;
    histogram_rows(&mut w, "pooling", &h.pooling)?;
    w.flush()?;
    Ok(())
}
