//! Bag datasets: the JSON-lines file format, a seeded synthetic generator,
//! and grouped fold assignment.
//!
//! Instances are precomputed feature vectors. Ground-truth anomaly flags
//! (present for synthetic data) live beside the bags rather than inside
//! them, so code that only receives `&[Bag]` cannot read them.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// Where an instance came from in the source image, when known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    /// `[x, y, width, height]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub features: Vec<f64>,
    pub source: Option<InstanceSource>,
}

impl Instance {
    pub fn new(features: Vec<f64>) -> Self {
        Instance {
            features,
            source: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub bag_id: String,
    pub group_id: String,
    pub label: usize,
    pub instances: Vec<Instance>,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.instances.first().map_or(0, |i| i.features.len())
    }

    /// Instance features stacked as an `N x m` matrix.
    pub fn feature_matrix(&self) -> Tensor2 {
        let m = self.dim();
        let mut data = Vec::with_capacity(self.len() * m);
        for inst in &self.instances {
            data.extend_from_slice(&inst.features);
        }
        Tensor2::from_vec(self.len(), m, data).expect("bag instances share one dimension")
    }
}

/// Label used for control (negative) bags.
pub const CONTROL_LABEL: usize = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    bags: Vec<Bag>,
    truth: Vec<Option<Vec<bool>>>,
    dim: usize,
}

impl Dataset {
    /// Validates bag invariants: non-empty bags, one shared feature
    /// dimension, finite values, truth flags matching bag sizes.
    pub fn new(bags: Vec<Bag>, truth: Vec<Option<Vec<bool>>>) -> Result<Self> {
        if bags.is_empty() {
            return Err(Error::Schema("dataset has no bags".into()));
        }
        if truth.len() != bags.len() {
            return Err(Error::Schema("one truth entry per bag is required".into()));
        }
        let dim = bags[0].dim();
        if dim == 0 {
            return Err(Error::Schema(format!(
                "bag `{}` has no features",
                bags[0].bag_id
            )));
        }
        for (bag, flags) in bags.iter().zip(&truth) {
            validate_bag(bag, dim)?;
            if let Some(f) = flags {
                if f.len() != bag.len() {
                    return Err(Error::Schema(format!(
                        "bag `{}` has {} instances but {} anomaly flags",
                        bag.bag_id,
                        bag.len(),
                        f.len()
                    )));
                }
            }
        }
        Ok(Dataset { bags, truth, dim })
    }

    pub fn from_bags(bags: Vec<Bag>) -> Result<Self> {
        let truth = vec![None; bags.len()];
        Self::new(bags, truth)
    }

    /// Bags without any ground-truth flags; this is all training code sees.
    pub fn training_view(&self) -> &[Bag] {
        &self.bags
    }

    /// Bags paired with their ground-truth anomaly flags, for evaluation.
    pub fn evaluation_view(&self) -> impl Iterator<Item = (&Bag, Option<&[bool]>)> {
        self.bags.iter().zip(self.truth.iter().map(|t| t.as_deref()))
    }

    pub fn truth(&self, index: usize) -> Option<&[bool]> {
        self.truth[index].as_deref()
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    /// Instance feature dimension `m`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// One more than the largest label present.
    pub fn n_classes(&self) -> usize {
        self.bags.iter().map(|b| b.label).max().map_or(0, |l| l + 1)
    }

    pub fn instance_count(&self) -> usize {
        self.bags.iter().map(Bag::len).sum()
    }

    /// Bags at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let bags = indices.iter().map(|&i| self.bags[i].clone()).collect();
        let truth = indices.iter().map(|&i| self.truth[i].clone()).collect();
        Dataset::new(bags, truth)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for (bag, flags) in self.evaluation_view() {
            let record = BagRecord::from_bag(bag, flags);
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_jsonl(std::io::BufWriter::new(file))
    }

    pub fn read_jsonl<R: Read>(input: R) -> Result<Dataset> {
        let mut bags = Vec::new();
        let mut truth = Vec::new();
        let mut dim: Option<usize> = None;
        for (idx, line) in BufReader::new(input).lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: BagRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: line_no,
                reason: e.to_string(),
            })?;
            let (bag, flags) = record.into_bag().map_err(|reason| Error::Parse {
                line: line_no,
                reason,
            })?;
            let expected = *dim.get_or_insert(bag.dim());
            validate_bag(&bag, expected).map_err(|e| match e {
                Error::Schema(msg) => Error::Schema(format!("line {line_no}: {msg}")),
                other => other,
            })?;
            bags.push(bag);
            truth.push(flags);
        }
        if bags.is_empty() {
            return Err(Error::Schema("bag file contains no records".into()));
        }
        Dataset::new(bags, truth)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        Self::read_jsonl(file)
    }
}

fn validate_bag(bag: &Bag, dim: usize) -> Result<()> {
    if bag.is_empty() {
        return Err(Error::Schema(format!("bag `{}` is empty", bag.bag_id)));
    }
    for (i, inst) in bag.instances.iter().enumerate() {
        if inst.features.len() != dim {
            return Err(Error::Schema(format!(
                "bag `{}` instance {i} has {} features, expected {dim}",
                bag.bag_id,
                inst.features.len()
            )));
        }
        if !inst.features.iter().all(|v| v.is_finite()) {
            return Err(Error::Schema(format!(
                "bag `{}` instance {i} has non-finite features",
                bag.bag_id
            )));
        }
    }
    Ok(())
}

/// One line of the bag file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BagRecord {
    bag_id: String,
    group_id: String,
    label: usize,
    instances: Vec<InstanceRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    anomalous: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<InstanceSource>,
}

impl BagRecord {
    fn from_bag(bag: &Bag, flags: Option<&[bool]>) -> Self {
        BagRecord {
            bag_id: bag.bag_id.clone(),
            group_id: bag.group_id.clone(),
            label: bag.label,
            instances: bag
                .instances
                .iter()
                .enumerate()
                .map(|(i, inst)| InstanceRecord {
                    features: inst.features.clone(),
                    anomalous: flags.map(|f| f[i]),
                    source: inst.source.clone(),
                })
                .collect(),
        }
    }

    fn into_bag(self) -> std::result::Result<(Bag, Option<Vec<bool>>), String> {
        let flagged = self.instances.iter().filter(|i| i.anomalous.is_some()).count();
        if flagged != 0 && flagged != self.instances.len() {
            return Err("anomaly flags must be given for all instances of a bag or none".into());
        }
        let flags = (flagged > 0).then(|| {
            self.instances
                .iter()
                .map(|i| i.anomalous.unwrap_or(false))
                .collect()
        });
        let instances = self
            .instances
            .into_iter()
            .map(|i| Instance {
                features: i.features,
                source: i.source,
            })
            .collect();
        Ok((
            Bag {
                bag_id: self.bag_id,
                group_id: self.group_id,
                label: self.label,
                instances,
            },
            flags,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// One benign component, anomalies 20 sigma away.
    #[default]
    Separable,
    /// Two benign components, weak shifts, few anomalies per bag.
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub preset: Preset,
    /// Total classes including control (label 0).
    pub n_classes: usize,
    /// Instance feature dimension.
    pub dim: usize,
    pub bags_per_class: usize,
    /// Inclusive bag-size range.
    pub bag_size: [usize; 2],
    /// Range of the fraction of anomalous instances in a positive bag.
    pub anomaly_fraction: [f64; 2],
    /// Length of each class's anomaly shift, in units of benign sigma.
    pub separation: f64,
    pub benign_components: usize,
    /// Distance of benign component means from the origin.
    pub benign_spread: f64,
    /// Per-coordinate std of an offset shared by every instance of a group,
    /// in units of benign sigma: a patient or session batch effect.
    pub group_shift: f64,
    pub bags_per_group: usize,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Separable => GeneratorConfig {
                preset,
                n_classes: 5,
                dim: 32,
                bags_per_class: 60,
                bag_size: [12, 45],
                anomaly_fraction: [0.05, 0.3],
                separation: 20.0,
                benign_components: 1,
                benign_spread: 0.0,
                group_shift: 0.0,
                bags_per_group: 5,
                seed: 0,
            },
            Preset::Hard => GeneratorConfig {
                preset,
                n_classes: 5,
                dim: 32,
                bags_per_class: 60,
                bag_size: [12, 45],
                anomaly_fraction: [0.05, 0.15],
                separation: 5.5,
                benign_components: 2,
                benign_spread: 1.5,
                group_shift: 0.0,
                bags_per_group: 5,
                seed: 0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::config("n_classes", "need control plus at least one disorder"));
        }
        if self.dim == 0 {
            return Err(Error::config("dim", "must be at least 1"));
        }
        if self.bags_per_class == 0 {
            return Err(Error::config("bags_per_class", "must be at least 1"));
        }
        let [lo, hi] = self.bag_size;
        if lo < 1 || hi > 10_000 || lo > hi {
            return Err(Error::config("bag_size", "range must lie within [1, 10000]"));
        }
        let [a, b] = self.anomaly_fraction;
        if !(a > 0.0 && b <= 1.0 && a <= b) {
            return Err(Error::config("anomaly_fraction", "range must lie within (0, 1]"));
        }
        if !(self.separation >= 0.0) || !self.separation.is_finite() {
            return Err(Error::config("separation", "must be a non-negative number"));
        }
        if self.benign_components == 0 {
            return Err(Error::config("benign_components", "must be at least 1"));
        }
        if !self.benign_spread.is_finite() {
            return Err(Error::config("benign_spread", "must be finite"));
        }
        if !(self.group_shift >= 0.0) || !self.group_shift.is_finite() {
            return Err(Error::config("group_shift", "must be a finite number >= 0"));
        }
        if self.bags_per_group == 0 {
            return Err(Error::config("bags_per_group", "must be at least 1"));
        }
        Ok(())
    }
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::preset(Preset::Separable)
    }
}

/// The distributions a generated dataset was drawn from.
#[derive(Debug, Clone)]
pub struct GeneratorModel {
    pub benign_means: Vec<Vec<f64>>,
    /// Unit shift direction per class; entry 0 (control) is unused.
    pub directions: Vec<Vec<f64>>,
    pub separation: f64,
}

impl GeneratorModel {
    fn new(config: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Self {
        let benign_means = (0..config.benign_components)
            .map(|_| {
                if config.benign_components == 1 {
                    vec![0.0; config.dim]
                } else {
                    let mut u = unit_vector(config.dim, rng);
                    u.iter_mut().for_each(|v| *v *= config.benign_spread);
                    u
                }
            })
            .collect();
        let directions = (0..config.n_classes)
            .map(|c| {
                if c == CONTROL_LABEL {
                    vec![0.0; config.dim]
                } else {
                    unit_vector(config.dim, rng)
                }
            })
            .collect();
        GeneratorModel {
            benign_means,
            directions,
            separation: config.separation,
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let comp = rng.random_range(0..self.benign_means.len());
        self.benign_means[comp]
            .iter()
            .map(|m| {
                let e: f64 = StandardNormal.sample(rng);
                m + e
            })
            .collect::<Vec<f64>>()
    }

    fn benign(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.draw(rng)
    }

    fn anomalous(&self, class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut x = self.draw(rng);
        for (v, d) in x.iter_mut().zip(&self.directions[class]) {
            *v += self.separation * d;
        }
        x
    }

    /// Mean of class `class`'s anomaly distribution.
    pub fn anomaly_centroid(&self, class: usize) -> Vec<f64> {
        let k = self.benign_means.len() as f64;
        let dim = self.directions[class].len();
        (0..dim)
            .map(|j| {
                self.benign_means.iter().map(|m| m[j]).sum::<f64>() / k
                    + self.separation * self.directions[class][j]
            })
            .collect()
    }
}

fn unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Draws a dataset. Control bags (label 0) contain only benign instances;
/// a bag of class `c > 0` mixes benign instances with a random fraction of
/// instances shifted along class `c`'s direction.
pub fn generate(config: &GeneratorConfig) -> Result<Dataset> {
    Ok(generate_with_model(config)?.0)
}

pub fn generate_with_model(config: &GeneratorConfig) -> Result<(Dataset, GeneratorModel)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = GeneratorModel::new(config, &mut rng);
    let mut bags = Vec::new();
    let mut truth = Vec::new();
    let [lo, hi] = config.bag_size;
    let [fa, fb] = config.anomaly_fraction;

    for class in 0..config.n_classes {
        let mut offset = vec![0.0; config.dim];
        for b in 0..config.bags_per_class {
            if config.group_shift > 0.0 && b % config.bags_per_group == 0 {
                for v in offset.iter_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v = config.group_shift * e;
                }
            }
            let n = rng.random_range(lo..=hi);
            let n_anom = if class == CONTROL_LABEL {
                0
            } else {
                let frac = if fa < fb { rng.random_range(fa..=fb) } else { fa };
                ((frac * n as f64).round() as usize).clamp(1, n)
            };
            let mut flags: Vec<bool> = (0..n).map(|i| i < n_anom).collect();
            flags.shuffle(&mut rng);
            let instances = flags
                .iter()
                .map(|&anom| {
                    let mut f = if anom {
                        model.anomalous(class, &mut rng)
                    } else {
                        model.benign(&mut rng)
                    };
                    for (v, o) in f.iter_mut().zip(&offset) {
                        *v += o;
                    }
                    Instance::new(f)
                })
                .collect();
            bags.push(Bag {
                bag_id: format!("c{class}-b{b:04}"),
                group_id: format!("c{class}-p{:03}", b / config.bags_per_group),
                label: class,
                instances,
            });
            truth.push(Some(flags));
        }
    }
    Ok((Dataset::new(bags, truth)?, model))
}

/// Fold index for every bag; all bags of a group share a fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub folds: usize,
    pub fold_of_bag: Vec<usize>,
    pub groups: Vec<Vec<String>>,
}

impl FoldAssignment {
    pub fn validation_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of_bag.len())
            .filter(|&i| self.fold_of_bag[i] == fold)
            .collect()
    }

    pub fn training_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of_bag.len())
            .filter(|&i| self.fold_of_bag[i] != fold)
            .collect()
    }
}

/// Partitions group ids into `folds` folds.
///
/// Groups are ordered by label, shuffled within each label with `seed`, and
/// dealt round-robin, so folds get near-equal group counts and similar class
/// mixes.
pub fn split_by_group(bags: &[Bag], folds: usize, seed: u64) -> Result<FoldAssignment> {
    if folds < 2 {
        return Err(Error::config("folds", "need at least 2 folds"));
    }
    let mut label_of: BTreeMap<&str, usize> = BTreeMap::new();
    for bag in bags {
        label_of.entry(bag.group_id.as_str()).or_insert(bag.label);
    }
    if label_of.len() < folds {
        return Err(Error::config(
            "folds",
            format!("{} distinct groups cannot fill {folds} folds", label_of.len()),
        ));
    }
    let labels: BTreeSet<usize> = label_of.values().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of_group: BTreeMap<&str, usize> = BTreeMap::new();
    let mut groups = vec![Vec::new(); folds];
    let mut next = 0;
    for label in labels {
        let mut ids: Vec<&str> = label_of
            .iter()
            .filter(|(_, &l)| l == label)
            .map(|(g, _)| *g)
            .collect();
        ids.shuffle(&mut rng);
        for id in ids {
            fold_of_group.insert(id, next);
            groups[next].push(id.to_string());
            next = (next + 1) % folds;
        }
    }
    let fold_of_bag = bags
        .iter()
        .map(|b| fold_of_group[b.group_id.as_str()])
        .collect();
    Ok(FoldAssignment {
        folds,
        fold_of_bag,
        groups,
    })
}
