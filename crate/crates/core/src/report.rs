//! Per-instance score export and the unseen-class holdout experiment.

use serde::{Deserialize, Serialize};

use crate::data::{split_by_group, Bag, Dataset, CONTROL_LABEL};
use crate::error::{Error, Result};
use crate::metrics::{anomaly_separation, histogram, ScoreHistogram};
use crate::model::{argmax, Checkpoint, ModelConfig, Variant};
use crate::training::{train, EpochRecord, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagScore {
    pub bag_id: String,
    pub label: usize,
    pub predicted: usize,
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScore {
    pub bag_id: String,
    pub label: usize,
    pub index: usize,
    pub attention: f64,
    pub anomaly: f64,
    pub pooling: f64,
    pub anomalous: Option<bool>,
}

/// Bag predictions plus `(a_n, d_n, p_n)` for every instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub bags: Vec<BagScore>,
    pub instances: Vec<InstanceScore>,
}

impl ScoreReport {
    pub fn build(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<ScoreReport> {
        if dataset.dim() != checkpoint.model_config.input_dim {
            return Err(Error::Schema(format!(
                "dataset has {} features, checkpoint expects {}",
                dataset.dim(),
                checkpoint.model_config.input_dim
            )));
        }
        let mut bags = Vec::with_capacity(dataset.len());
        let mut instances = Vec::with_capacity(dataset.instance_count());
        for (bag, truth) in dataset.evaluation_view() {
            let f = checkpoint.forward(bag)?;
            bags.push(BagScore {
                bag_id: bag.bag_id.clone(),
                label: bag.label,
                predicted: argmax(&f.bag_logits),
                logits: f.bag_logits.clone(),
            });
            for n in 0..bag.len() {
                instances.push(InstanceScore {
                    bag_id: bag.bag_id.clone(),
                    label: bag.label,
                    index: n,
                    attention: f.attention[n],
                    anomaly: f.anomaly[n],
                    pooling: f.pooling[n],
                    anomalous: truth.map(|t| t[n]),
                });
            }
        }
        Ok(ScoreReport { bags, instances })
    }

    /// Per-class histograms of the three instance scores.
    pub fn histograms(&self, n_classes: usize, bins: usize) -> Result<ScoreHistogram> {
        let classes: Vec<usize> = self.instances.iter().map(|i| i.label).collect();
        let col = |f: fn(&InstanceScore) -> f64| self.instances.iter().map(f).collect::<Vec<_>>();
        Ok(ScoreHistogram {
            attention: histogram(&col(|i| i.attention), &classes, n_classes, bins, None)?,
            anomaly: histogram(&col(|i| i.anomaly), &classes, n_classes, bins, None)?,
            pooling: histogram(&col(|i| i.pooling), &classes, n_classes, bins, None)?,
        })
    }
}

/// Result of training without one class and scoring it afterwards.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HoldoutReport {
    pub held_out_class: usize,
    pub variant: Variant,
    /// Labels present in the training split.
    pub training_classes: Vec<usize>,
    pub training_bags: Vec<String>,
    pub control_eval_bags: Vec<String>,
    pub held_out_bags: Vec<String>,
    /// Positives: held-out instances flagged anomalous by the generator
    /// (all held-out instances when the dataset has no flags).
    pub n_positive: usize,
    pub n_control: usize,
    pub anomaly_auroc: f64,
    pub attention_auroc: f64,
    /// Same comparison with every held-out instance as a positive.
    pub anomaly_auroc_all: f64,
    pub attention_auroc_all: f64,
    pub records: Vec<EpochRecord>,
}

/// Holdout experiment: train `variant` on every bag except those of
/// `held_out`, with one group fold of control bags also kept aside, then
/// compare anomaly and attention scores of held-out-class instances against
/// the unseen control instances.
pub fn holdout(
    dataset: &Dataset,
    held_out: usize,
    variant: Variant,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(HoldoutReport, Checkpoint)> {
    if held_out == CONTROL_LABEL {
        return Err(Error::config(
            "holdout.class",
            "the control class defines the negative mixture and cannot be held out",
        ));
    }
    if !dataset.training_view().iter().any(|b| b.label == held_out) {
        return Err(Error::config(
            "holdout.class",
            format!("class {held_out} has no bags in the dataset"),
        ));
    }
    let kept: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.training_view()[i].label != held_out)
        .collect();
    let kept_bags: Vec<Bag> = kept.iter().map(|&i| dataset.training_view()[i].clone()).collect();
    let folds = split_by_group(&kept_bags, train_config.folds, train_config.seed)?;
    let val = folds.validation_indices(0);
    let control_eval: Vec<usize> = val
        .iter()
        .copied()
        .filter(|&j| kept_bags[j].label == CONTROL_LABEL)
        .collect();
    let train_bags: Vec<Bag> = folds
        .training_indices(0)
        .into_iter()
        .map(|j| kept_bags[j].clone())
        .collect();
    if control_eval.is_empty() {
        return Err(Error::config(
            "train.folds",
            "no control group left out for evaluation",
        ));
    }

    let out = train(&train_bags, None, variant, model_config, train_config)?;
    let ck = out.checkpoint;

    let mut anomaly_pos = Vec::new();
    let mut attention_pos = Vec::new();
    let mut anomaly_all = Vec::new();
    let mut attention_all = Vec::new();
    let mut held_out_bags = Vec::new();
    for (i, (bag, truth)) in dataset.evaluation_view().enumerate() {
        if bag.label != held_out {
            continue;
        }
        held_out_bags.push(bag.bag_id.clone());
        let f = ck.forward(&dataset.training_view()[i])?;
        for n in 0..bag.len() {
            anomaly_all.push(f.anomaly[n]);
            attention_all.push(f.attention[n]);
            if truth.map_or(true, |t| t[n]) {
                anomaly_pos.push(f.anomaly[n]);
                attention_pos.push(f.attention[n]);
            }
        }
    }
    let mut anomaly_ctl = Vec::new();
    let mut attention_ctl = Vec::new();
    for &j in &control_eval {
        let f = ck.forward(&kept_bags[j])?;
        anomaly_ctl.extend_from_slice(&f.anomaly);
        attention_ctl.extend_from_slice(&f.attention);
    }
    if anomaly_pos.is_empty() {
        return Err(Error::Schema(format!(
            "class {held_out} has no anomalous instances to score"
        )));
    }

    let mut training_classes: Vec<usize> = train_bags.iter().map(|b| b.label).collect();
    training_classes.sort_unstable();
    training_classes.dedup();
    let report = HoldoutReport {
        held_out_class: held_out,
        variant,
        training_classes,
        training_bags: train_bags.iter().map(|b| b.bag_id.clone()).collect(),
        control_eval_bags: control_eval.iter().map(|&j| kept_bags[j].bag_id.clone()).collect(),
        held_out_bags,
        n_positive: anomaly_pos.len(),
        n_control: anomaly_ctl.len(),
        anomaly_auroc: anomaly_separation(&anomaly_pos, &anomaly_ctl)?,
        attention_auroc: anomaly_separation(&attention_pos, &attention_ctl)?,
        anomaly_auroc_all: anomaly_separation(&anomaly_all, &anomaly_ctl)?,
        attention_auroc_all: anomaly_separation(&attention_all, &attention_ctl)?,
        records: out.records,
    };
    Ok((report, ck))
}
