use std::path::Path;
use std::time::Instant;

use amil_core::data::{generate_with_model, split_by_group};
use amil_core::report::holdout;
use amil_core::training::evaluate_bags;
use amil_core::{cross_validate_many, train, Bag, Checkpoint, Dataset, Error, ScoreReport};
use anyhow::Context;
use serde_json::json;

use crate::config::{Explicit, RunConfig};
use crate::manifest::{Job, RunManifest};
use crate::output::{self, OutDir};

/// Runs `job`, writes its outputs and manifest into `out`, and returns the
/// manifest.
pub fn execute(job: &Job, mut cfg: RunConfig, explicit: Explicit, out: &Path) -> anyhow::Result<RunManifest> {
    let start = Instant::now();
    let mut dir = OutDir::create(out, &job.inputs())?;
    let details = match job {
        Job::Generate => generate(&cfg, &mut dir)?,
        Job::Train { data, variant } => {
            let ds = load(data)?;
            fit_model_to_data(&mut cfg, explicit, &ds)?;
            train_cmd(&cfg, &ds, *variant, &mut dir)?
        }
        Job::Ablation { data, variants } => {
            let ds = load(data)?;
            fit_model_to_data(&mut cfg, explicit, &ds)?;
            let reports = cross_validate_many(ds.training_view(), &cfg.model, &cfg.train, variants)?;
            output::write_ablation(&mut dir, "ablation.csv", &reports)?;
            output::write_folds(&mut dir, "folds.csv", &reports)?;
            dir.write_json("ablation.json", &reports)?;
            json!({ "bags": ds.len(), "variants": variants })
        }
        Job::Score { checkpoint, data } => score(&cfg, checkpoint, data, &mut dir)?,
        Job::Holdout { data, class, variant } => {
            let ds = load(data)?;
            fit_model_to_data(&mut cfg, explicit, &ds)?;
            holdout_cmd(&cfg, &ds, *class, *variant, &mut dir)?
        }
    };
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        job: job.clone(),
        seed: cfg.train.seed,
        config: cfg,
        output_dir: out.to_path_buf(),
        outputs: dir.written(),
        duration_secs: start.elapsed().as_secs_f64(),
        details,
    };
    manifest.write()?;
    Ok(manifest)
}

fn load(path: &Path) -> anyhow::Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading {}", path.display()))
}

/// Fills `model.input_dim` and `model.n_classes` from the dataset unless
/// the configuration set them, in which case they must agree.
fn fit_model_to_data(cfg: &mut RunConfig, explicit: Explicit, ds: &Dataset) -> anyhow::Result<()> {
    if explicit.input_dim {
        if cfg.model.input_dim != ds.dim() {
            return Err(Error::Schema(format!(
                "dataset has {} features, model.input_dim is {}",
                ds.dim(),
                cfg.model.input_dim
            ))
            .into());
        }
    } else {
        cfg.model.input_dim = ds.dim();
    }
    if explicit.n_classes {
        if ds.n_classes() > cfg.model.n_classes {
            return Err(Error::Schema(format!(
                "dataset has labels up to {}, model.n_classes is {}",
                ds.n_classes() - 1,
                cfg.model.n_classes
            ))
            .into());
        }
    } else {
        cfg.model.n_classes = ds.n_classes().max(2);
    }
    Ok(())
}

fn generate(cfg: &RunConfig, dir: &mut OutDir) -> anyhow::Result<serde_json::Value> {
    let (ds, model) = generate_with_model(&cfg.generator)?;
    let path = dir.path("dataset.jsonl")?;
    ds.save(&path)?;
    let centroids: Vec<Vec<f64>> = (1..cfg.generator.n_classes)
        .map(|c| model.anomaly_centroid(c))
        .collect();
    Ok(json!({
        "bags": ds.len(),
        "instances": ds.instance_count(),
        "benign_means": model.benign_means,
        "anomaly_centroids": centroids,
    }))
}

fn train_cmd(
    cfg: &RunConfig,
    ds: &Dataset,
    variant: amil_core::Variant,
    dir: &mut OutDir,
) -> anyhow::Result<serde_json::Value> {
    let bags = ds.training_view();
    let (train_bags, val_bags): (Vec<Bag>, Option<Vec<Bag>>) = match cfg.experiment.validation_fold {
        None => (bags.to_vec(), None),
        Some(k) => {
            if k >= cfg.train.folds {
                return Err(Error::config(
                    "experiment.validation_fold",
                    format!("must be below train.folds ({})", cfg.train.folds),
                )
                .into());
            }
            let folds = split_by_group(bags, cfg.train.folds, cfg.train.seed)?;
            let pick = |idx: Vec<usize>| idx.into_iter().map(|i| bags[i].clone()).collect();
            (pick(folds.training_indices(k)), Some(pick(folds.validation_indices(k))))
        }
    };
    let out = train(&train_bags, val_bags.as_deref(), variant, &cfg.model, &cfg.train)?;
    dir.write_text("checkpoint.json", &out.checkpoint.to_json()?)?;
    if let Some(r) = &out.checkpoint.reference {
        dir.write_text("gmm.json", &r.gmm.to_json()?)?;
    }
    output::write_epochs(dir, "epochs.csv", &out.records)?;
    Ok(json!({
        "variant": variant,
        "training_bags": train_bags.len(),
        "validation_bags": val_bags.map(|v| v.len()),
        "final_epoch": out.records.last(),
    }))
}

fn score(cfg: &RunConfig, checkpoint: &Path, data: &Path, dir: &mut OutDir) -> anyhow::Result<serde_json::Value> {
    let text = std::fs::read_to_string(checkpoint)
        .with_context(|| format!("reading {}", checkpoint.display()))?;
    let ck = Checkpoint::from_json(&text)?;
    let ds = load(data)?;
    let report = ScoreReport::build(&ck, &ds)?;
    let n_classes = ck.model_config.n_classes;
    if let Some(bad) = ds.training_view().iter().find(|b| b.label >= n_classes) {
        return Err(Error::Schema(format!(
            "bag `{}` has label {} but the checkpoint has {n_classes} classes",
            bad.bag_id, bad.label
        ))
        .into());
    }
    let hist = report.histograms(n_classes, cfg.experiment.histogram_bins)?;
    output::write_bags(dir, "bags.csv", &report, n_classes)?;
    output::write_instances(dir, "instances.csv", report.instances.iter().map(|i| (i, None)), false)?;
    output::write_histograms(dir, "histograms.csv", &hist)?;
    dir.write_json("histograms.json", &hist)?;
    let eval = evaluate_bags(&ck, ds.training_view())?;
    dir.write_json("eval.json", &eval)?;
    Ok(json!({
        "bags": report.bags.len(),
        "instances": report.instances.len(),
        "accuracy": eval.accuracy,
    }))
}

fn holdout_cmd(
    cfg: &RunConfig,
    ds: &Dataset,
    class: usize,
    variant: amil_core::Variant,
    dir: &mut OutDir,
) -> anyhow::Result<serde_json::Value> {
    let (report, ck) = holdout(ds, class, variant, &cfg.model, &cfg.train)?;
    let ids: Vec<usize> = ds
        .training_view()
        .iter()
        .enumerate()
        .filter(|(_, b)| b.label == class || report.control_eval_bags.contains(&b.bag_id))
        .map(|(i, _)| i)
        .collect();
    let scored = ScoreReport::build(&ck, &ds.subset(&ids)?)?;
    let rows = scored.instances.iter().map(|i| {
        let set = if i.label == class { "held_out" } else { "control" };
        (i, Some(set))
    });
    output::write_instances(dir, "holdout_scores.csv", rows, true)?;

    let mut w = dir.csv("holdout.csv")?;
    w.write_record(["score", "auroc", "auroc_all_instances", "n_positive", "n_control"])?;
    for (name, a, all) in [
        ("anomaly", report.anomaly_auroc, report.anomaly_auroc_all),
        ("attention", report.attention_auroc, report.attention_auroc_all),
    ] {
        w.write_record([
            name.to_string(),
            a.to_string(),
            all.to_string(),
            report.n_positive.to_string(),
            report.n_control.to_string(),
        ])?;
    }
    w.flush()?;
    drop(w);
    output::write_epochs(dir, "epochs.csv", &report.records)?;
    dir.write_text("checkpoint.json", &ck.to_json()?)?;
    dir.write_json("holdout.json", &report)?;
    Ok(json!({
        "held_out_class": class,
        "training_classes": report.training_classes,
        "training_bags": report.training_bags,
        "control_eval_bags": report.control_eval_bags,
        "anomaly_auroc": report.anomaly_auroc,
        "attention_auroc": report.attention_auroc,
    }))
}
