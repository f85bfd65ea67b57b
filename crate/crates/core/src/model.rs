//! The anomaly-aware MIL network.
//!
//! Per bag: an MLP encoder maps every instance to an embedding `z_n`; an
//! attention net scores each embedding (`a_n`); the anomaly reference scores
//! each embedding by Mahalanobis distance (`d_n`); the two scores are mixed
//! by a pair of shared scalars into pooling weights
//! `p_n = W_D * d_n + W_A * a_n`; the bag embedding is `z_B = sum_n p_n z_n`
//! and a linear head turns it into class logits. A second linear head (the
//! single-instance classifier) produces per-instance logits for the auxiliary
//! loss.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anomaly::{AnomalyGradient, AnomalyReference};
use crate::autodiff::{Graph, Var};
use crate::data::Bag;
use crate::error::{Error, Result};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    #[default]
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionNorm {
    /// Softmax over the instances of the bag.
    #[default]
    Softmax,
    /// Unnormalized attention-net output.
    Raw,
}

/// The five configurations compared in the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Att,
    AttSic,
    Anomaly,
    AnomalyAtt,
    AnomalyAttSic,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Att,
        Variant::AttSic,
        Variant::Anomaly,
        Variant::AnomalyAtt,
        Variant::AnomalyAttSic,
    ];

    pub fn uses_anomaly(self) -> bool {
        matches!(self, Variant::Anomaly | Variant::AnomalyAtt | Variant::AnomalyAttSic)
    }

    pub fn uses_attention(self) -> bool {
        !matches!(self, Variant::Anomaly)
    }

    pub fn uses_sic(self) -> bool {
        matches!(self, Variant::AttSic | Variant::AnomalyAttSic)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Att => "att",
            Variant::AttSic => "att-sic",
            Variant::Anomaly => "anomaly",
            Variant::AnomalyAtt => "anomaly-att",
            Variant::AnomalyAttSic => "anomaly-att-sic",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "variant",
                    format!("`{s}` is not one of att, att-sic, anomaly, anomaly-att, anomaly-att-sic"),
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Instance feature dimension `m`.
    pub input_dim: usize,
    /// Embedding dimension `k`.
    pub embed_dim: usize,
    pub n_classes: usize,
    /// Widths of the encoder's hidden layers; the encoder has
    /// `encoder_hidden.len() + 1` affine layers.
    pub encoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub attention_hidden: usize,
    pub attention_norm: AttentionNorm,
    pub anomaly_gradient: AnomalyGradient,
    /// Divide anomaly scores by their mean over the calibration set.
    pub standardize_anomaly: bool,
    /// `W_D` trainable; when false it is frozen at 0.
    pub anomaly_pooling: bool,
    /// `W_A` in use; when false it is frozen at 0. It is trained only
    /// together with `W_D`.
    pub attention_pooling: bool,
    pub init_w_d: f64,
    pub init_w_a: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 32,
            embed_dim: 8,
            n_classes: 5,
            encoder_hidden: vec![32, 16, 16],
            activation: Activation::Relu,
            attention_hidden: 16,
            attention_norm: AttentionNorm::Softmax,
            anomaly_gradient: AnomalyGradient::Flow,
            standardize_anomaly: true,
            anomaly_pooling: true,
            attention_pooling: true,
            init_w_d: 0.1,
            init_w_a: 1.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be at least 1"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("model.embed_dim", "must be at least 1"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("model.n_classes", "must be at least 2"));
        }
        if self.attention_hidden == 0 {
            return Err(Error::config("model.attention_hidden", "must be at least 1"));
        }
        if self.encoder_hidden.contains(&0) {
            return Err(Error::config("model.encoder_hidden", "layer widths must be at least 1"));
        }
        if !self.init_w_d.is_finite() || !self.init_w_a.is_finite() {
            return Err(Error::config("model.init_w_d", "initial pooling weights must be finite"));
        }
        Ok(())
    }

    /// Sets the pooling flags for `variant`.
    pub fn apply_variant(&mut self, variant: Variant) {
        self.anomaly_pooling = variant.uses_anomaly();
        self.attention_pooling = variant.uses_attention();
    }

    fn encoder_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.encoder_hidden);
        dims.push(self.embed_dim);
        dims
    }
}

/// `x W + b`, with `W` stored `in x out` and `b` as a `1 x out` row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: Tensor2,
    pub bias: Tensor2,
}

impl Affine {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut weight = Tensor2::zeros(fan_in, fan_out);
        for v in weight.as_mut_slice() {
            *v = rng.random_range(-limit..limit);
        }
        Affine {
            weight,
            bias: Tensor2::zeros(1, fan_out),
        }
    }

    pub fn apply(&self, x: &Tensor2) -> Result<Tensor2> {
        let mut y = x.matmul(&self.weight)?;
        for r in 0..y.rows() {
            for (o, b) in y.row_mut(r).iter_mut().zip(self.bias.as_slice()) {
                *o += b;
            }
        }
        Ok(y)
    }
}

/// All learnable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: Vec<Affine>,
    pub attention_hidden: Affine,
    pub attention_out: Affine,
    /// `1 x 1` anomaly mixing weight `W_D`.
    pub w_d: Tensor2,
    /// `1 x 1` attention mixing weight `W_A`.
    pub w_a: Tensor2,
    pub bag_head: Affine,
    pub sic_head: Affine,
}

impl ModelParams {
    /// Glorot-uniform weights and zero biases from `config.seed`. Frozen
    /// pooling weights start (and stay) at 0.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dims = config.encoder_dims();
        let encoder = dims
            .windows(2)
            .map(|w| Affine::glorot(w[0], w[1], &mut rng))
            .collect();
        let k = config.embed_dim;
        let attention_hidden = Affine::glorot(k, config.attention_hidden, &mut rng);
        let attention_out = Affine::glorot(config.attention_hidden, 1, &mut rng);
        let bag_head = Affine::glorot(k, config.n_classes, &mut rng);
        let sic_head = Affine::glorot(k, config.n_classes, &mut rng);
        let w_d = if config.anomaly_pooling { config.init_w_d } else { 0.0 };
        let w_a = if config.attention_pooling { config.init_w_a } else { 0.0 };
        Ok(ModelParams {
            encoder,
            attention_hidden,
            attention_out,
            w_d: Tensor2::scalar(w_d),
            w_a: Tensor2::scalar(w_a),
            bag_head,
            sic_head,
        })
    }

    /// Parameter names in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.encoder.len() {
            names.push(format!("encoder.{i}.weight"));
            names.push(format!("encoder.{i}.bias"));
        }
        for n in [
            "attention.hidden.weight",
            "attention.hidden.bias",
            "attention.out.weight",
            "attention.out.bias",
            "pool.w_d",
            "pool.w_a",
            "bag_head.weight",
            "bag_head.bias",
            "sic_head.weight",
            "sic_head.bias",
        ] {
            names.push(n.to_string());
        }
        names
    }

    /// Tensors in the order of [`ModelParams::names`].
    pub fn tensors(&self) -> Vec<&Tensor2> {
        let mut out = Vec::new();
        for layer in &self.encoder {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        out.extend([
            &self.attention_hidden.weight,
            &self.attention_hidden.bias,
            &self.attention_out.weight,
            &self.attention_out.bias,
            &self.w_d,
            &self.w_a,
            &self.bag_head.weight,
            &self.bag_head.bias,
            &self.sic_head.weight,
            &self.sic_head.bias,
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut out = Vec::new();
        for layer in &mut self.encoder {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out.extend([
            &mut self.attention_hidden.weight,
            &mut self.attention_hidden.bias,
            &mut self.attention_out.weight,
            &mut self.attention_out.bias,
            &mut self.w_d,
            &mut self.w_a,
            &mut self.bag_head.weight,
            &mut self.bag_head.bias,
            &mut self.sic_head.weight,
            &mut self.sic_head.bias,
        ]);
        out
    }

    /// Which tensors the optimizer may update under `config`.
    ///
    /// Without anomaly pooling `W_A` would only rescale the bag embedding,
    /// which the bag head absorbs, so it stays at its initial value and the
    /// model is exactly attention-MIL.
    pub fn trainable_mask(&self, config: &ModelConfig) -> Vec<bool> {
        let n = self.tensors().len();
        let mut mask = vec![true; n];
        // w_d and w_a sit just before the two heads (4 tensors).
        mask[n - 6] = config.anomaly_pooling;
        mask[n - 5] = config.attention_pooling && config.anomaly_pooling;
        mask
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Checks shapes against `config`.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let reference = ModelParams::init(config)?;
        let ours = self.tensors();
        let theirs = reference.tensors();
        if ours.len() != theirs.len() {
            return Err(Error::Schema(format!(
                "checkpoint has {} tensors, configuration implies {}",
                ours.len(),
                theirs.len()
            )));
        }
        for ((name, a), b) in self.names().iter().zip(ours).zip(theirs) {
            if a.shape() != b.shape() {
                return Err(Error::Schema(format!(
                    "parameter `{name}` is {:?}, configuration implies {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Output of one bag's forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagForward {
    pub embeddings: Tensor2,
    pub attention: Vec<f64>,
    pub anomaly: Vec<f64>,
    pub pooling: Vec<f64>,
    pub bag_embedding: Vec<f64>,
    pub bag_logits: Vec<f64>,
    /// `N x |C|` single-instance-classifier logits.
    pub sic_logits: Tensor2,
}

/// Graph handles for one bag's forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// One node per parameter tensor, in canonical order.
    pub params: Vec<Var>,
    pub embeddings: Var,
    pub attention: Var,
    pub anomaly: Var,
    pub pooling: Var,
    pub bag_embedding: Var,
    pub bag_logits: Var,
    pub sic_logits: Var,
}

impl ForwardVars {
    pub fn read(&self, graph: &Graph) -> BagForward {
        BagForward {
            embeddings: graph.value(self.embeddings).clone(),
            attention: graph.value(self.attention).as_slice().to_vec(),
            anomaly: graph.value(self.anomaly).as_slice().to_vec(),
            pooling: graph.value(self.pooling).as_slice().to_vec(),
            bag_embedding: graph.value(self.bag_embedding).as_slice().to_vec(),
            bag_logits: graph.value(self.bag_logits).as_slice().to_vec(),
            sic_logits: graph.value(self.sic_logits).clone(),
        }
    }
}

/// Encoder layers applied to node `x`.
fn encoder_nodes(graph: &mut Graph, x: Var, layers: &[(Var, Var)], act: Activation) -> Result<Var> {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        h = graph.affine(h, w, b)?;
        if i + 1 < layers.len() {
            h = match act {
                Activation::Tanh => graph.tanh(h),
                Activation::Relu => graph.relu(h),
            };
        }
    }
    Ok(h)
}

fn attention_nodes(
    graph: &mut Graph,
    z: Var,
    hidden: (Var, Var),
    out: (Var, Var),
    norm: AttentionNorm,
) -> Result<Var> {
    let h = graph.affine(z, hidden.0, hidden.1)?;
    let h = graph.tanh(h);
    let s = graph.affine(h, out.0, out.1)?;
    Ok(match norm {
        AttentionNorm::Raw => s,
        AttentionNorm::Softmax => {
            let row = graph.transpose(s);
            let row = graph.softmax_rows(row);
            graph.transpose(row)
        }
    })
}

/// Builds the full forward pass for `features` (`N x m`) into `graph`.
///
/// Trainable tensors become leaves; pooling weights frozen by `config` become
/// constants. `reference` must be present when anomaly pooling is on; when it
/// is absent the anomaly scores are zero.
pub fn build_forward(
    graph: &mut Graph,
    params: &ModelParams,
    reference: Option<&AnomalyReference>,
    features: &Tensor2,
    config: &ModelConfig,
) -> Result<ForwardVars> {
    if features.cols() != config.input_dim {
        return Err(Error::dim(
            "forward",
            format!(
                "instances have {} features, model expects {}",
                features.cols(),
                config.input_dim
            ),
        ));
    }
    if features.rows() == 0 {
        return Err(Error::Contract("bag has no instances".into()));
    }
    if config.anomaly_pooling && reference.is_none() {
        return Err(Error::Contract(
            "anomaly pooling needs a fitted negative-instance mixture".into(),
        ));
    }
    if let Some(r) = reference {
        if r.gmm.dim() != config.embed_dim {
            return Err(Error::dim(
                "forward",
                format!(
                    "mixture dim {} does not match embedding dim {}",
                    r.gmm.dim(),
                    config.embed_dim
                ),
            ));
        }
    }

    let mask = params.trainable_mask(config);
    let param_vars: Vec<Var> = params
        .tensors()
        .into_iter()
        .zip(&mask)
        .map(|(t, &train)| {
            if train {
                graph.leaf(t.clone())
            } else {
                graph.constant(t.clone())
            }
        })
        .collect();

    let n_enc = params.encoder.len();
    let enc: Vec<(Var, Var)> = (0..n_enc)
        .map(|i| (param_vars[2 * i], param_vars[2 * i + 1]))
        .collect();
    let rest = &param_vars[2 * n_enc..];
    let (att_h, att_o) = ((rest[0], rest[1]), (rest[2], rest[3]));
    let (w_d, w_a) = (rest[4], rest[5]);
    let (bag_w, bag_b, sic_w, sic_b) = (rest[6], rest[7], rest[8], rest[9]);

    let x = graph.constant(features.clone());
    let z = encoder_nodes(graph, x, &enc, config.activation)?;
    let a = attention_nodes(graph, z, att_h, att_o, config.attention_norm)?;
    let d = match reference {
        Some(r) => r.score_node(graph, z, config.anomaly_gradient)?,
        None => graph.constant(Tensor2::zeros(features.rows(), 1)),
    };

    let pd = graph.mul_scalar(d, w_d)?;
    let pa = graph.mul_scalar(a, w_a)?;
    let p = graph.add(pd, pa)?;
    let pt = graph.transpose(p);
    let z_bag = graph.matmul(pt, z)?;
    let bag_logits = graph.affine(z_bag, bag_w, bag_b)?;
    let sic_logits = graph.affine(z, sic_w, sic_b)?;

    Ok(ForwardVars {
        params: param_vars,
        embeddings: z,
        attention: a,
        anomaly: d,
        pooling: p,
        bag_embedding: z_bag,
        bag_logits,
        sic_logits,
    })
}

/// Forward pass of one bag.
pub fn forward_bag(
    params: &ModelParams,
    reference: Option<&AnomalyReference>,
    bag: &Bag,
    config: &ModelConfig,
) -> Result<BagForward> {
    let mut graph = Graph::new();
    let vars = build_forward(&mut graph, params, reference, &bag.feature_matrix(), config)?;
    Ok(vars.read(&graph))
}

/// Embeddings `z_n` of every instance in `bag`.
pub fn encode(params: &ModelParams, bag: &Bag, config: &ModelConfig) -> Result<Tensor2> {
    encode_features(params, &bag.feature_matrix(), config)
}

pub fn encode_features(params: &ModelParams, features: &Tensor2, config: &ModelConfig) -> Result<Tensor2> {
    if features.cols() != config.input_dim {
        return Err(Error::dim(
            "encode",
            format!(
                "instances have {} features, model expects {}",
                features.cols(),
                config.input_dim
            ),
        ));
    }
    let mut h = features.clone();
    for (i, layer) in params.encoder.iter().enumerate() {
        h = layer.apply(&h)?;
        if i + 1 < params.encoder.len() {
            h = match config.activation {
                Activation::Tanh => h.map(f64::tanh),
                Activation::Relu => h.map(|v| v.max(0.0)),
            };
        }
    }
    Ok(h)
}

/// Attention scores for each row of `embeddings`.
pub fn attend(params: &ModelParams, embeddings: &Tensor2, config: &ModelConfig) -> Result<Vec<f64>> {
    let mut graph = Graph::new();
    let z = graph.constant(embeddings.clone());
    let h = (
        graph.constant(params.attention_hidden.weight.clone()),
        graph.constant(params.attention_hidden.bias.clone()),
    );
    let o = (
        graph.constant(params.attention_out.weight.clone()),
        graph.constant(params.attention_out.bias.clone()),
    );
    let a = attention_nodes(&mut graph, z, h, o, config.attention_norm)?;
    Ok(graph.value(a).as_slice().to_vec())
}

/// Pooling weights `p_n = W_D d_n + W_A a_n` and the bag embedding
/// `z_B = sum_n p_n z_n`.
pub fn pool(
    w_d: f64,
    w_a: f64,
    anomaly: &[f64],
    attention: &[f64],
    embeddings: &Tensor2,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if anomaly.len() != attention.len() || anomaly.len() != embeddings.rows() {
        return Err(Error::dim(
            "pool",
            format!(
                "{} anomaly scores, {} attention scores, {} embeddings",
                anomaly.len(),
                attention.len(),
                embeddings.rows()
            ),
        ));
    }
    let p: Vec<f64> = anomaly
        .iter()
        .zip(attention)
        .map(|(d, a)| w_d * d + w_a * a)
        .collect();
    let mut z_bag = vec![0.0; embeddings.cols()];
    for (row, &w) in embeddings.iter_rows().zip(&p) {
        for (o, v) in z_bag.iter_mut().zip(row) {
            *o += w * v;
        }
    }
    Ok((p, z_bag))
}

/// Argmax of `logits`, ties going to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn predict(forward: &BagForward) -> usize {
    argmax(&forward.bag_logits)
}

pub const CHECKPOINT_FORMAT: &str = "amil-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained model as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub variant: Variant,
    pub model_config: ModelConfig,
    pub params: ModelParams,
    pub reference: Option<AnomalyReference>,
}

impl Checkpoint {
    pub fn new(
        variant: Variant,
        model_config: ModelConfig,
        params: ModelParams,
        reference: Option<AnomalyReference>,
    ) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            variant,
            model_config,
            params,
            reference,
        }
    }

    pub fn forward(&self, bag: &Bag) -> Result<BagForward> {
        forward_bag(&self.params, self.reference.as_ref(), bag, &self.model_config)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        ck.model_config.validate()?;
        ck.params.check_shapes(&ck.model_config)?;
        Ok(ck)
    }
}
