//! Full-covariance Gaussian mixture fitted by maximum-likelihood EM.
//!
//! The mixture is fitted on embeddings of negative (control) instances and
//! serves as the reference distribution for anomaly scoring. Refits during
//! training warm-start from the previous parameters.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::log_sum_exp;
use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::tensor::Tensor2;

pub const GMM_FORMAT: &str = "amil-gmm";
pub const GMM_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub max_iterations: usize,
    /// Stop once the relative log-likelihood gain drops to this value.
    pub tolerance: f64,
    /// Added to the covariance diagonal when a component collapses.
    pub covariance_floor: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iterations: 100,
            tolerance: 1e-6,
            covariance_floor: 1e-6,
            seed: 0,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::config("em.max_iterations", "must be at least 1"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::config("em.tolerance", "must be positive"));
        }
        if !(self.covariance_floor > 0.0) {
            return Err(Error::config("em.covariance_floor", "must be positive"));
        }
        Ok(())
    }
}

/// Diagnostics from the last EM run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    /// Number of M-steps performed.
    pub iterations: usize,
    pub converged: bool,
    /// Set when some component's covariance had to be floored.
    pub floor_applied: bool,
    pub warm_started: bool,
    /// Total log-likelihood of the data, one entry for the initial
    /// parameters and one after every M-step.
    pub log_likelihood: Vec<f64>,
}

impl FitInfo {
    pub fn final_log_likelihood(&self) -> Option<f64> {
        self.log_likelihood.last().copied()
    }
}

/// Mixture weights, means and full covariances, with cached Cholesky factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "GmmDocument", try_from = "GmmDocument")]
pub struct GmmParams {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Tensor2>,
    cholesky: Vec<Cholesky>,
    /// `log w_i - 0.5 * (k ln 2pi + ln det S_i)` per component.
    log_norm: Vec<f64>,
    pub fit: FitInfo,
}

impl GmmParams {
    /// Builds a mixture from explicit parameters, factoring each covariance.
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Tensor2>) -> Result<Self> {
        let n = weights.len();
        if n == 0 || means.len() != n || covariances.len() != n {
            return Err(Error::dim(
                "gmm",
                format!(
                    "{} weights, {} means, {} covariances",
                    n,
                    means.len(),
                    covariances.len()
                ),
            ));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::dim("gmm", "zero-dimensional means"));
        }
        for (i, (m, c)) in means.iter().zip(&covariances).enumerate() {
            if m.len() != dim || c.shape() != (dim, dim) {
                return Err(Error::dim(
                    "gmm",
                    format!("component {i} does not match dimension {dim}"),
                ));
            }
            if !m.iter().all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("component {i} mean is not finite")));
            }
        }
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::Contract("mixture weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("mixture weights sum to {total}")));
        }
        let cholesky = covariances
            .iter()
            .map(Cholesky::factor)
            .collect::<Result<Vec<_>>>()?;
        let mut params = GmmParams {
            weights,
            means,
            covariances,
            cholesky,
            log_norm: vec![],
            fit: FitInfo::default(),
        };
        params.refresh_norms();
        Ok(params)
    }

    fn refresh_norms(&mut self) {
        let k = self.dim() as f64;
        self.log_norm = self
            .weights
            .iter()
            .zip(&self.cholesky)
            .map(|(&w, c)| w.ln() - 0.5 * (k * (2.0 * PI).ln() + c.log_det()))
            .collect();
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[Tensor2] {
        &self.covariances
    }

    /// Cholesky factors of the covariances, one per component.
    pub fn cholesky(&self) -> &[Cholesky] {
        &self.cholesky
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::dim(
                "gmm",
                format!("point has {} dims, mixture has {}", z.len(), self.dim()),
            ));
        }
        Ok(())
    }

    /// Squared Mahalanobis distance of `z` to component `i`.
    pub(crate) fn squared_distance(&self, i: usize, z: &[f64], work: &mut Vec<f64>) -> f64 {
        work.clear();
        work.extend(z.iter().zip(&self.means[i]).map(|(a, b)| a - b));
        self.cholesky[i].forward_in_place(work);
        work.iter().map(|v| v * v).sum()
    }

    fn component_log_densities_into(&self, z: &[f64], out: &mut Vec<f64>, work: &mut Vec<f64>) {
        out.clear();
        for i in 0..self.n_components() {
            let q = self.squared_distance(i, z, work);
            out.push(self.log_norm[i] - 0.5 * q);
        }
    }

    /// `log w_i + log N(z | mu_i, S_i)` for each component.
    pub fn component_log_densities(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        let mut out = Vec::with_capacity(self.n_components());
        self.component_log_densities_into(z, &mut out, &mut Vec::new());
        Ok(out)
    }

    /// Log of the mixture density at `z`.
    pub fn log_pdf(&self, z: &[f64]) -> Result<f64> {
        Ok(log_sum_exp(&self.component_log_densities(z)?))
    }

    /// Posterior component probabilities at `z`.
    pub fn responsibilities(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut lp = self.component_log_densities(z)?;
        let lse = log_sum_exp(&lp);
        for v in lp.iter_mut() {
            *v = (*v - lse).exp();
        }
        Ok(lp)
    }

    /// Total log-likelihood of the rows of `data`.
    pub fn log_likelihood(&self, data: &Tensor2) -> Result<f64> {
        if data.cols() != self.dim() {
            return Err(Error::dim("gmm", "data dimension mismatch"));
        }
        let (mut lp, mut work) = (Vec::new(), Vec::new());
        Ok(data
            .iter_rows()
            .map(|row| {
                self.component_log_densities_into(row, &mut lp, &mut work);
                log_sum_exp(&lp)
            })
            .sum())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Versioned on-disk form of [`GmmParams`]. Covariances are row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmDocument {
    pub format: String,
    pub version: u32,
    pub n_components: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<f64>>,
    pub fit: FitInfo,
}

impl From<GmmParams> for GmmDocument {
    fn from(g: GmmParams) -> Self {
        GmmDocument {
            format: GMM_FORMAT.to_string(),
            version: GMM_VERSION,
            n_components: g.n_components(),
            dim: g.dim(),
            covariances: g.covariances.into_iter().map(Tensor2::into_vec).collect(),
            weights: g.weights,
            means: g.means,
            fit: g.fit,
        }
    }
}

impl TryFrom<GmmDocument> for GmmParams {
    type Error = Error;

    fn try_from(doc: GmmDocument) -> Result<Self> {
        if doc.format != GMM_FORMAT || doc.version != GMM_VERSION {
            return Err(Error::Schema(format!(
                "unsupported mixture document {} v{}",
                doc.format, doc.version
            )));
        }
        if doc.weights.len() != doc.n_components {
            return Err(Error::Schema("component count mismatch".into()));
        }
        let covariances = doc
            .covariances
            .into_iter()
            .map(|c| Tensor2::from_vec(doc.dim, doc.dim, c))
            .collect::<Result<Vec<_>>>()?;
        let mut g = GmmParams::new(doc.weights, doc.means, covariances)?;
        g.fit = doc.fit;
        Ok(g)
    }
}

/// Fits a `n_components` mixture to the rows of `data`.
///
/// With `warm_start` the iteration begins from those parameters; otherwise
/// means are seeded k-means++ style from data points (using `config.seed`),
/// each covariance starts at the pooled data covariance and weights are
/// uniform.
pub fn em_fit(
    data: &Tensor2,
    n_components: usize,
    config: &EmConfig,
    warm_start: Option<&GmmParams>,
) -> Result<GmmParams> {
    config.validate()?;
    let (n, k) = data.shape();
    if n_components == 0 {
        return Err(Error::Contract("mixture needs at least one component".into()));
    }
    if n < n_components {
        return Err(Error::Contract(format!(
            "{n} samples cannot support {n_components} components"
        )));
    }
    if k == 0 {
        return Err(Error::dim("em_fit", "zero-dimensional data"));
    }
    if !data.is_finite() {
        return Err(Error::Numeric("training data for the mixture is not finite".into()));
    }

    let mut floor_applied = false;
    let mut params = match warm_start {
        Some(g) => {
            if g.n_components() != n_components || g.dim() != k {
                return Err(Error::dim(
                    "em_fit",
                    format!(
                        "warm start has {} components of dim {}, requested {} of dim {}",
                        g.n_components(),
                        g.dim(),
                        n_components,
                        k
                    ),
                ));
            }
            let mut g = g.clone();
            g.fit = FitInfo::default();
            g
        }
        None => cold_start(data, n_components, config, &mut floor_applied)?,
    };

    let mut resp = Tensor2::zeros(n, n_components);
    let mut ll = e_step(&params, data, &mut resp);
    let mut history = vec![ll];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < config.max_iterations {
        params = m_step(&params, data, &resp, config.covariance_floor, &mut floor_applied)?;
        iterations += 1;
        let next = e_step(&params, data, &mut resp);
        history.push(next);
        let gain = next - ll;
        ll = next;
        if gain <= config.tolerance * ll.abs() {
            converged = true;
            break;
        }
    }

    params.fit = FitInfo {
        iterations,
        converged,
        floor_applied,
        warm_started: warm_start.is_some(),
        log_likelihood: history,
    };
    Ok(params)
}

fn cold_start(
    data: &Tensor2,
    n_components: usize,
    config: &EmConfig,
    floor_applied: &mut bool,
) -> Result<GmmParams> {
    let (n, k) = data.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut centers: Vec<usize> = vec![rng.random_range(0..n)];
    let mut nearest = vec![f64::INFINITY; n];
    while centers.len() < n_components {
        let last = data.row(*centers.last().unwrap());
        for (d, row) in nearest.iter_mut().zip(data.iter_rows()) {
            let dist: f64 = row.iter().zip(last).map(|(a, b)| (a - b) * (a - b)).sum();
            *d = d.min(dist);
        }
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(pick);
    }

    let mean = data.sum_rows().scale(1.0 / n as f64);
    let mut cov = Tensor2::zeros(k, k);
    let mut diff = vec![0.0; k];
    for row in data.iter_rows() {
        for ((d, x), m) in diff.iter_mut().zip(row).zip(mean.as_slice()) {
            *d = x - m;
        }
        add_outer(&mut cov, &diff, 1.0);
    }
    let mut cov = cov.scale(1.0 / n as f64);
    symmetrize(&mut cov);
    apply_floor(&mut cov, config.covariance_floor, floor_applied);

    let weights = vec![1.0 / n_components as f64; n_components];
    let means = centers.iter().map(|&i| data.row(i).to_vec()).collect();
    GmmParams::new(weights, means, vec![cov; n_components])
}

/// Fills `resp` with posterior probabilities and returns the total
/// log-likelihood of `data` under `params`.
fn e_step(params: &GmmParams, data: &Tensor2, resp: &mut Tensor2) -> f64 {
    let (mut lp, mut work) = (Vec::new(), Vec::new());
    let mut total = 0.0;
    for (n, row) in data.iter_rows().enumerate() {
        params.component_log_densities_into(row, &mut lp, &mut work);
        let lse = log_sum_exp(&lp);
        total += lse;
        for (r, &l) in resp.row_mut(n).iter_mut().zip(&lp) {
            *r = (l - lse).exp();
        }
    }
    total
}

fn m_step(
    prev: &GmmParams,
    data: &Tensor2,
    resp: &Tensor2,
    floor: f64,
    floor_applied: &mut bool,
) -> Result<GmmParams> {
    let (n, k) = data.shape();
    let n_comp = resp.cols();
    let mut weights = Vec::with_capacity(n_comp);
    let mut means = Vec::with_capacity(n_comp);
    let mut covariances = Vec::with_capacity(n_comp);
    let mut diff = vec![0.0; k];

    for c in 0..n_comp {
        let nk: f64 = (0..n).map(|i| resp[(i, c)]).sum();
        weights.push(nk / n as f64);
        if nk <= 0.0 {
            // Dead component: its weight is zero, so mean and covariance are
            // irrelevant to the likelihood. Keep the previous ones.
            means.push(prev.means[c].clone());
            covariances.push(prev.covariances[c].clone());
            continue;
        }
        let mut mean = vec![0.0; k];
        for (i, row) in data.iter_rows().enumerate() {
            let r = resp[(i, c)];
            for (m, x) in mean.iter_mut().zip(row) {
                *m += r * x;
            }
        }
        for m in mean.iter_mut() {
            *m /= nk;
        }
        let mut cov = Tensor2::zeros(k, k);
        for (i, row) in data.iter_rows().enumerate() {
            let r = resp[(i, c)];
            if r == 0.0 {
                continue;
            }
            for ((d, x), m) in diff.iter_mut().zip(row).zip(&mean) {
                *d = x - m;
            }
            add_outer(&mut cov, &diff, r);
        }
        let mut cov = cov.scale(1.0 / nk);
        symmetrize(&mut cov);
        apply_floor(&mut cov, floor, floor_applied);
        means.push(mean);
        covariances.push(cov);
    }

    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    GmmParams::new(weights, means, covariances)
}

fn add_outer(acc: &mut Tensor2, v: &[f64], scale: f64) {
    let k = v.len();
    for i in 0..k {
        let s = scale * v[i];
        let row = acc.row_mut(i);
        for j in 0..=i {
            row[j] += s * v[j];
        }
    }
}

/// Mirrors the accumulated lower triangle into the upper one.
fn symmetrize(m: &mut Tensor2) {
    for i in 0..m.rows() {
        for j in 0..i {
            m[(j, i)] = m[(i, j)];
        }
    }
}

/// Adds `floor * I` when the covariance has collapsed: a diagonal entry
/// below the floor or no exact Cholesky factor.
fn apply_floor(cov: &mut Tensor2, floor: f64, flag: &mut bool) {
    let collapsed = (0..cov.rows()).any(|i| cov[(i, i)] < floor)
        || Cholesky::factor_exact(cov, 0.0).is_err();
    if collapsed {
        for i in 0..cov.rows() {
            cov[(i, i)] += floor;
        }
        *flag = true;
    }
}
