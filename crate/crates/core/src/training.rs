//! Training: annealed SIC + MIL loss, Adam with decoupled weight decay,
//! periodic mixture recalibration, and grouped k-fold cross-validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anomaly::AnomalyReference;
use crate::autodiff::{softmax_rows, Graph, Var};
use crate::data::{split_by_group, Bag, FoldAssignment, CONTROL_LABEL};
use crate::error::{Error, Result};
use crate::gmm::{em_fit, EmConfig, GmmParams};
use crate::metrics::{evaluate, EvalReport, MeanStd};
use crate::model::{
    argmax, build_forward, encode_features, Checkpoint, ModelConfig, ModelParams, Variant,
};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub folds: usize,
    /// Base of the SIC weight schedule `beta(e) = sic_base^e`.
    pub sic_base: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Refit the negative mixture every this many epochs.
    pub recalibration_period: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub repeats: usize,
    pub gmm_components: usize,
    pub em: EmConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            folds: 3,
            sic_base: 0.95,
            learning_rate: 5e-5,
            weight_decay: 1e-5,
            recalibration_period: 5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            repeats: 5,
            gmm_components: 1,
            em: EmConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sic_base > 0.0 && self.sic_base < 1.0) {
            return Err(Error::config("train.sic_base", "must lie in (0, 1)"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("train.learning_rate", "must be a non-negative number"));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::config("train.weight_decay", "must be a non-negative number"));
        }
        if self.folds < 2 {
            return Err(Error::config("train.folds", "must be at least 2"));
        }
        if self.recalibration_period < 1 {
            return Err(Error::config("train.recalibration_period", "must be at least 1"));
        }
        if self.repeats < 1 {
            return Err(Error::config("train.repeats", "must be at least 1"));
        }
        if self.gmm_components < 1 {
            return Err(Error::config("train.gmm_components", "must be at least 1"));
        }
        for (name, v) in [("train.adam_beta1", self.adam_beta1), ("train.adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(name, "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps", "must be positive"));
        }
        self.em.validate()
    }
}

/// SIC weight at 0-based epoch `epoch`: `base^epoch`.
pub fn beta(epoch: usize, base: f64) -> f64 {
    base.powi(epoch as i32)
}

/// `(1 - beta) * bag_ce + beta * sic_ce`.
pub fn combined_loss(bag_ce: f64, sic_ce: f64, beta: f64) -> f64 {
    (1.0 - beta) * bag_ce + beta * sic_ce
}

/// Graph form of [`combined_loss`]. With `beta == 0` the SIC term is left
/// out of the graph entirely.
pub fn combined_loss_node(graph: &mut Graph, bag_ce: Var, sic_ce: Var, beta: f64) -> Result<Var> {
    if beta == 0.0 {
        return Ok(bag_ce);
    }
    let a = graph.scale(bag_ce, 1.0 - beta);
    let b = graph.scale(sic_ce, beta);
    graph.add(a, b)
}

/// Noisy instance labels: every instance inherits the bag label.
pub fn sic_targets(bag: &Bag) -> Vec<usize> {
    vec![bag.label; bag.len()]
}

/// Adam moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<Tensor2>,
    pub second: Vec<Tensor2>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self::for_shapes(params.tensors().iter().map(|t| t.shape()))
    }

    pub fn for_shapes(shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let zeros: Vec<Tensor2> = shapes.into_iter().map(|(r, c)| Tensor2::zeros(r, c)).collect();
        AdamState {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay applied to
/// every tensor whose `mask` entry is set:
///
/// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
///
/// All gradients are checked for finiteness before anything is modified.
pub fn adam_update(
    params: &mut [&mut Tensor2],
    names: &[String],
    grads: &[Tensor2],
    mask: &[bool],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.first.len() != params.len() || mask.len() != params.len() {
        return Err(Error::dim(
            "adam_step",
            format!("{} parameters, {} gradients", params.len(), grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if !p.same_shape(g) {
            return Err(Error::dim(
                "adam_step",
                format!("gradient for `{}` has shape {:?}", names[i], g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                param: names[i].clone(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.adam_beta1, config.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = config.learning_rate;
    let wd = config.weight_decay;
    for (i, p) in params.iter_mut().enumerate() {
        if !mask[i] {
            continue;
        }
        let g = grads[i].as_slice();
        let m = state.first[i].as_mut_slice();
        let v = state.second[i].as_mut_slice();
        for (j, w) in p.as_mut_slice().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * (m_hat / (v_hat.sqrt() + config.adam_eps) + wd * *w);
        }
    }
    Ok(())
}

/// [`adam_update`] over a [`ModelParams`].
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Tensor2],
    mask: &[bool],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    let names = params.names();
    let mut tensors = params.tensors_mut();
    adam_update(&mut tensors, &names, grads, mask, state, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub beta: f64,
    pub mil_loss: f64,
    pub sic_loss: f64,
    /// `(1 - beta) * mil_loss + beta * sic_loss`.
    pub combined_loss: f64,
    pub val_accuracy: Option<f64>,
    pub val_macro_f1: Option<f64>,
    /// Whether the negative mixture was (re)fitted before this epoch.
    pub recalibrated: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub records: Vec<EpochRecord>,
}

/// Embeddings of every control instance in `bags`, stacked.
pub fn control_embeddings(params: &ModelParams, bags: &[Bag], config: &ModelConfig) -> Result<Tensor2> {
    let mut rows = Vec::new();
    let mut n = 0;
    for bag in bags.iter().filter(|b| b.label == CONTROL_LABEL) {
        let z = encode_features(params, &bag.feature_matrix(), config)?;
        n += z.rows();
        rows.extend(z.into_vec());
    }
    Tensor2::from_vec(n, config.embed_dim, rows)
}

/// Fits (or, with `previous`, warm-refits) the negative mixture on the
/// current encoder's control embeddings.
pub fn calibrate(
    params: &ModelParams,
    bags: &[Bag],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    previous: Option<&GmmParams>,
) -> Result<AnomalyReference> {
    let z = control_embeddings(params, bags, model_config)?;
    let em = EmConfig {
        seed: train_config.seed,
        ..train_config.em.clone()
    };
    let gmm = em_fit(&z, train_config.gmm_components, &em, previous)?;
    AnomalyReference::calibrate(gmm, &z, model_config.standardize_anomaly)
}

/// Bag-level predictions and softmax class scores.
pub fn predict_bags(checkpoint: &Checkpoint, bags: &[Bag]) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let mut preds = Vec::with_capacity(bags.len());
    let mut scores = Vec::with_capacity(bags.len());
    for bag in bags {
        let f = checkpoint.forward(bag)?;
        preds.push(argmax(&f.bag_logits));
        scores.push(softmax_rows(&Tensor2::row_vector(&f.bag_logits)).into_vec());
    }
    Ok((preds, scores))
}

pub fn evaluate_bags(checkpoint: &Checkpoint, bags: &[Bag]) -> Result<EvalReport> {
    let (preds, scores) = predict_bags(checkpoint, bags)?;
    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    evaluate(&preds, &labels, &scores, checkpoint.model_config.n_classes)
}

/// Trains one model of `variant` on `bags`.
///
/// The negative mixture is fitted cold on the control embeddings before the
/// first epoch and warm-refitted at the start of every
/// `recalibration_period`-th epoch. Bags are visited one at a time in a
/// seeded shuffled order, with one Adam step per bag.
pub fn train(
    bags: &[Bag],
    validation: Option<&[Bag]>,
    variant: Variant,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<TrainOutput> {
    train_config.validate()?;
    let mut model_config = model_config.clone();
    model_config.apply_variant(variant);
    model_config.validate()?;
    if bags.is_empty() {
        return Err(Error::config("dataset", "no training bags"));
    }
    if let Some(bad) = bags.iter().find(|b| b.label >= model_config.n_classes) {
        return Err(Error::config(
            "model.n_classes",
            format!("bag `{}` has label {}", bad.bag_id, bad.label),
        ));
    }
    let has_controls = bags.iter().any(|b| b.label == CONTROL_LABEL);
    if model_config.anomaly_pooling && !has_controls {
        return Err(Error::config(
            "dataset",
            "anomaly pooling needs at least one control bag in the training split",
        ));
    }

    let mut params = ModelParams::init(&model_config)?;
    let mask = params.trainable_mask(&model_config);
    let names = params.names();
    let mut adam = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut records = Vec::with_capacity(train_config.epochs);

    let mut reference = if has_controls {
        Some(calibrate(&params, bags, &model_config, train_config, None)?)
    } else {
        None
    };

    for epoch in 0..train_config.epochs {
        let recalibrated = epoch == 0 && reference.is_some();
        let recalibrated = if epoch > 0 && epoch % train_config.recalibration_period == 0 {
            match &reference {
                Some(r) => {
                    let refit = calibrate(&params, bags, &model_config, train_config, Some(&r.gmm))?;
                    reference = Some(refit);
                    true
                }
                None => false,
            }
        } else {
            recalibrated
        };

        let b = if variant.uses_sic() {
            beta(epoch, train_config.sic_base)
        } else {
            0.0
        };
        order.shuffle(&mut rng);
        let (mut mil_sum, mut sic_sum) = (0.0, 0.0);
        for &i in &order {
            let bag = &bags[i];
            let mut graph = Graph::new();
            let fv = build_forward(
                &mut graph,
                &params,
                reference.as_ref(),
                &bag.feature_matrix(),
                &model_config,
            )?;
            let mil = graph.cross_entropy(fv.bag_logits, &[bag.label])?;
            let sic = graph.cross_entropy(fv.sic_logits, &sic_targets(bag))?;
            let loss = combined_loss_node(&mut graph, mil, sic, b)?;
            mil_sum += graph.value(mil).item();
            sic_sum += graph.value(sic).item();
            if !graph.value(loss).item().is_finite() {
                return Err(Error::Numeric(format!(
                    "loss diverged at epoch {epoch} on bag `{}`",
                    bag.bag_id
                )));
            }
            let mut grads = graph.backward(loss)?;
            let g: Vec<Tensor2> = fv.params.iter().map(|&v| grads.take(v)).collect();
            let mut tensors = params.tensors_mut();
            adam_update(&mut tensors, &names, &g, &mask, &mut adam, train_config)?;
        }
        let n = bags.len() as f64;
        let (mil_loss, sic_loss) = (mil_sum / n, sic_sum / n);

        let (val_accuracy, val_macro_f1) = match validation {
            Some(val) if !val.is_empty() => {
                let ck = Checkpoint::new(variant, model_config.clone(), params.clone(), reference.clone());
                let report = evaluate_bags(&ck, val)?;
                (Some(report.accuracy), Some(report.macro_f1))
            }
            _ => (None, None),
        };
        log::debug!(
            "{variant} epoch {epoch}: beta {b:.4} mil {mil_loss:.5} sic {sic_loss:.5} val {val_accuracy:?}"
        );
        records.push(EpochRecord {
            epoch,
            beta: b,
            mil_loss,
            sic_loss,
            combined_loss: combined_loss(mil_loss, sic_loss, b),
            val_accuracy,
            val_macro_f1,
            recalibrated,
        });
    }

    if !params.is_finite() {
        return Err(Error::Numeric("parameters became non-finite".into()));
    }
    Ok(TrainOutput {
        checkpoint: Checkpoint::new(variant, model_config, params, reference),
        records,
    })
}

/// One (variant, repeat, fold) cross-validation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CvJob {
    pub variant: Variant,
    pub repeat: usize,
    pub fold: usize,
}

impl CvJob {
    /// `seed + fold * 1000 + repeat`.
    pub fn seed(&self, base: u64) -> u64 {
        base + self.fold as u64 * 1000 + self.repeat as u64
    }
}

#[derive(Debug, Clone)]
pub struct CvJobResult {
    pub job: CvJob,
    pub validation_bags: Vec<usize>,
    pub predictions: Vec<usize>,
    pub class_scores: Vec<Vec<f64>>,
    pub report: EvalReport,
}

/// Fold assignment used by every job of `repeat`.
pub fn repeat_assignment(bags: &[Bag], train_config: &TrainConfig, repeat: usize) -> Result<FoldAssignment> {
    split_by_group(bags, train_config.folds, train_config.seed + repeat as u64)
}

pub fn run_cv_job(
    bags: &[Bag],
    assignment: &FoldAssignment,
    job: CvJob,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<CvJobResult> {
    let seed = job.seed(train_config.seed);
    let tc = TrainConfig {
        seed,
        ..train_config.clone()
    };
    let mc = ModelConfig {
        seed,
        ..model_config.clone()
    };
    let train_idx = assignment.training_indices(job.fold);
    let val_idx = assignment.validation_indices(job.fold);
    let train_bags: Vec<Bag> = train_idx.iter().map(|&i| bags[i].clone()).collect();
    let val_bags: Vec<Bag> = val_idx.iter().map(|&i| bags[i].clone()).collect();
    let out = train(&train_bags, None, job.variant, &mc, &tc)?;
    let (predictions, class_scores) = predict_bags(&out.checkpoint, &val_bags)?;
    let labels: Vec<usize> = val_bags.iter().map(|b| b.label).collect();
    let report = evaluate(&predictions, &labels, &class_scores, mc.n_classes)?;
    Ok(CvJobResult {
        job,
        validation_bags: val_idx,
        predictions,
        class_scores,
        report,
    })
}

/// Cross-validation results for one variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub variant: Variant,
    /// `(repeat, fold, report)` for every job.
    pub per_fold: Vec<(usize, usize, EvalReport)>,
    /// Predictions pooled over the folds of each repeat.
    pub per_repeat: Vec<EvalReport>,
    pub summary: CvSummary,
}

/// Mean and population standard deviation over repeats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvSummary {
    pub accuracy: MeanStd,
    pub macro_f1: MeanStd,
    pub macro_auroc: Option<MeanStd>,
    pub macro_auprc: Option<MeanStd>,
    pub class_auroc: Vec<Option<MeanStd>>,
    pub class_auprc: Vec<Option<MeanStd>>,
}

impl CvSummary {
    pub fn from_repeats(reports: &[EvalReport]) -> Option<CvSummary> {
        let first = reports.first()?;
        let collect = |f: &dyn Fn(&EvalReport) -> Option<f64>| -> Option<MeanStd> {
            let v: Vec<f64> = reports.iter().filter_map(f).collect();
            MeanStd::of(&v)
        };
        Some(CvSummary {
            accuracy: collect(&|r| Some(r.accuracy))?,
            macro_f1: collect(&|r| Some(r.macro_f1))?,
            macro_auroc: collect(&|r| r.macro_auroc),
            macro_auprc: collect(&|r| r.macro_auprc),
            class_auroc: (0..first.n_classes).map(|c| collect(&|r| r.auroc[c])).collect(),
            class_auprc: (0..first.n_classes).map(|c| collect(&|r| r.auprc[c])).collect(),
        })
    }
}

/// Grouped k-fold cross-validation of several variants, repeated
/// `train_config.repeats` times.
///
/// Every (variant, repeat, fold) job is independent and they run on the
/// current rayon pool; results are gathered in job order, so the output does
/// not depend on scheduling.
pub fn cross_validate_many(
    bags: &[Bag],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    variants: &[Variant],
) -> Result<Vec<CvReport>> {
    train_config.validate()?;
    let assignments = (0..train_config.repeats)
        .map(|r| repeat_assignment(bags, train_config, r))
        .collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    for &variant in variants {
        for repeat in 0..train_config.repeats {
            for fold in 0..train_config.folds {
                jobs.push(CvJob {
                    variant,
                    repeat,
                    fold,
                });
            }
        }
    }
    let results = jobs
        .par_iter()
        .map(|&job| run_cv_job(bags, &assignments[job.repeat], job, model_config, train_config))
        .collect::<Result<Vec<_>>>()?;

    let labels: Vec<usize> = bags.iter().map(|b| b.label).collect();
    let mut reports = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mine: Vec<&CvJobResult> = results.iter().filter(|r| r.job.variant == variant).collect();
        let per_fold = mine
            .iter()
            .map(|r| (r.job.repeat, r.job.fold, r.report.clone()))
            .collect();
        let mut per_repeat = Vec::with_capacity(train_config.repeats);
        for repeat in 0..train_config.repeats {
            let mut preds = vec![0; bags.len()];
            let mut scores = vec![Vec::new(); bags.len()];
            for r in mine.iter().filter(|r| r.job.repeat == repeat) {
                for (k, &i) in r.validation_bags.iter().enumerate() {
                    preds[i] = r.predictions[k];
                    scores[i] = r.class_scores[k].clone();
                }
            }
            per_repeat.push(evaluate(&preds, &labels, &scores, model_config.n_classes)?);
        }
        let summary = CvSummary::from_repeats(&per_repeat)
            .ok_or_else(|| Error::Contract("no repeats to summarize".into()))?;
        reports.push(CvReport {
            variant,
            per_fold,
            per_repeat,
            summary,
        });
    }
    Ok(reports)
}

pub fn cross_validate(
    bags: &[Bag],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    variant: Variant,
) -> Result<CvReport> {
    Ok(cross_validate_many(bags, model_config, train_config, &[variant])?.remove(0))
}
