//! Mahalanobis anomaly scores against the fitted negative-instance mixture.
//!
//! The quadratic form is always evaluated through the cached Cholesky factor
//! (`|L^-1 (z - mu)|`), never an explicit inverse. For mixtures with more
//! than one component the score is the smallest per-component distance.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::gmm::GmmParams;
use crate::tensor::Tensor2;

fn check_cache(g: &GmmParams) -> Result<()> {
    if g.cholesky().len() != g.n_components() {
        return Err(Error::Contract(
            "mixture has no Cholesky cache for every component".into(),
        ));
    }
    Ok(())
}

/// Component with the smallest squared distance, and that distance.
fn nearest_component(g: &GmmParams, z: &[f64], work: &mut Vec<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for i in 0..g.n_components() {
        let q = g.squared_distance(i, z, work);
        if q < best.1 {
            best = (i, q);
        }
    }
    best
}

/// Mahalanobis distance of `z` to the mixture.
pub fn mahalanobis(g: &GmmParams, z: &[f64]) -> Result<f64> {
    check_cache(g)?;
    if z.len() != g.dim() {
        return Err(Error::dim(
            "mahalanobis",
            format!("point has {} dims, mixture has {}", z.len(), g.dim()),
        ));
    }
    let (_, q) = nearest_component(g, z, &mut Vec::with_capacity(z.len()));
    Ok(q.sqrt())
}

/// Distance and its gradient with respect to `z`.
///
/// The gradient is `S^-1 (z - mu) / d`, computed as `L^-T u / d` with
/// `u = L^-1 (z - mu)`. At `z = mu` it is defined to be zero.
pub fn mahalanobis_with_gradient(g: &GmmParams, z: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_cache(g)?;
    if z.len() != g.dim() {
        return Err(Error::dim(
            "mahalanobis",
            format!("point has {} dims, mixture has {}", z.len(), g.dim()),
        ));
    }
    let mut u = Vec::with_capacity(z.len());
    let (comp, q) = nearest_component(g, z, &mut u);
    // `u` holds the whitened residual of the last component visited; redo
    // it for the winner.
    g.squared_distance(comp, z, &mut u);
    let d = q.sqrt();
    if d == 0.0 {
        return Ok((0.0, vec![0.0; z.len()]));
    }
    g.cholesky()[comp].backward_in_place(&mut u);
    for v in u.iter_mut() {
        *v /= d;
    }
    Ok((d, u))
}

/// Scores every row of `embeddings`, preserving order.
pub fn score_bag(g: &GmmParams, embeddings: &Tensor2) -> Result<Vec<f64>> {
    embeddings
        .iter_rows()
        .map(|row| mahalanobis(g, row))
        .collect()
}

/// Whether anomaly scores pass gradient back to the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyGradient {
    #[default]
    Flow,
    Detach,
}

/// The fitted negative distribution plus the standardization divisor
/// (mean distance over the calibration set).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReference {
    pub gmm: GmmParams,
    pub scale: f64,
}

impl AnomalyReference {
    /// Builds a reference whose scale is the mean distance of the
    /// calibration embeddings, or 1 when `standardize` is off.
    pub fn calibrate(gmm: GmmParams, calibration: &Tensor2, standardize: bool) -> Result<Self> {
        let scale = if standardize {
            let scores = score_bag(&gmm, calibration)?;
            let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
            if mean > 0.0 && mean.is_finite() {
                mean
            } else {
                1.0
            }
        } else {
            1.0
        };
        Ok(AnomalyReference { gmm, scale })
    }

    /// Raw (unstandardized) distances for each row.
    pub fn raw_scores(&self, embeddings: &Tensor2) -> Result<Vec<f64>> {
        score_bag(&self.gmm, embeddings)
    }

    /// Appends the standardized scores of `embeddings` to `graph` as an
    /// `n x 1` node. The mixture is a constant; only `embeddings` can carry
    /// gradient, and only in [`AnomalyGradient::Flow`] mode.
    pub fn score_node(&self, graph: &mut Graph, embeddings: Var, mode: AnomalyGradient) -> Result<Var> {
        let z = graph.value(embeddings);
        let (n, k) = z.shape();
        let mut values = Tensor2::zeros(n, 1);
        match mode {
            AnomalyGradient::Detach => {
                for (i, row) in z.iter_rows().enumerate() {
                    values[(i, 0)] = mahalanobis(&self.gmm, row)? / self.scale;
                }
                Ok(graph.constant(values))
            }
            AnomalyGradient::Flow => {
                let mut jac = Tensor2::zeros(n, k);
                for (i, row) in z.iter_rows().enumerate() {
                    let (d, grad) = mahalanobis_with_gradient(&self.gmm, row)?;
                    values[(i, 0)] = d / self.scale;
                    for (o, g) in jac.row_mut(i).iter_mut().zip(grad) {
                        *o = g / self.scale;
                    }
                }
                graph.row_scalar(embeddings, values, jac)
            }
        }
    }
}
