//! Latent-context mixture of logistic experts.
//!
//! An assignment model softmaxes contexts from x_hat with the last context
//! pinned to zero logits, and each context k predicts the open label from x
//! with a binary logistic model in the convention P(y=1) = 1/(1+exp(psi_k.x)):
//! a LARGER psi_k.x means a LOWER open probability. All likelihood math runs
//! in log space; emitted probabilities clamp logits at +/-35 so they never
//! round to exactly 0 or 1.

pub mod em;
pub mod solver;

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Example;

/// Logit clamp applied to emitted probabilities.
const LOGIT_CLAMP: f64 = 35.0;

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn logsumexp(v: &[f64]) -> f64 {
    let max = v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// ln(1 + e^t), overflow-safe.
pub(crate) fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Trained (or planted) parameters of the mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    /// Number of contexts M.
    pub contexts: usize,
    /// Assignment feature dimension m.
    pub m: usize,
    /// Prediction feature dimension n.
    pub n: usize,
    /// Assignment weights, (M-1) rows of length m; context M is pinned to
    /// the zero vector.
    pub theta: Vec<Vec<f64>>,
    /// Prediction weights, M rows of length n.
    pub psi: Vec<Vec<f64>>,
    /// Hash of the feature schema the model was trained against; empty when
    /// trained on schema-less vectors.
    pub schema_hash: String,
}

impl MixtureParams {
    pub fn zeros(contexts: usize, m: usize, n: usize) -> Self {
        MixtureParams {
            contexts,
            m,
            n,
            theta: vec![vec![0.0; m]; contexts.saturating_sub(1)],
            psi: vec![vec![0.0; n]; contexts],
            schema_hash: String::new(),
        }
    }

    pub fn with_schema_hash(mut self, hash: impl Into<String>) -> Self {
        self.schema_hash = hash.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.contexts == 0 {
            return Err(Error::invalid("context count must be at least 1"));
        }
        if self.theta.len() != self.contexts - 1 || self.psi.len() != self.contexts {
            return Err(Error::invalid("parameter row counts do not match M"));
        }
        for row in &self.theta {
            if row.len() != self.m {
                return Err(Error::DimensionMismatch {
                    expected: self.m,
                    actual: row.len(),
                });
            }
        }
        for row in &self.psi {
            if row.len() != self.n {
                return Err(Error::DimensionMismatch {
                    expected: self.n,
                    actual: row.len(),
                });
            }
        }
        let finite = self
            .theta
            .iter()
            .chain(self.psi.iter())
            .flatten()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("parameters contain a non-finite value"));
        }
        Ok(())
    }

    /// Context probabilities for one x_hat; see [`assignment_probs`].
    pub fn assignment_probs(&self, x_hat: &[f64]) -> Result<Vec<f64>> {
        assignment_probs(&self.theta, x_hat)
    }

    /// Mixture open-rate prediction: sum over contexts of assignment
    /// probability times the context's open probability.
    pub fn predict_open_rate(&self, x_hat: &[f64], x: &[f64]) -> Result<f64> {
        let assign = self.assignment_probs(x_hat)?;
        let mut rate = 0.0;
        for (k, a) in assign.iter().enumerate() {
            rate += a * open_probability(&self.psi[k], x)?;
        }
        Ok(rate)
    }

    /// Same prediction with a pre-computed assignment distribution, used by
    /// the ranker which shares one distribution across candidates.
    pub fn predict_with_assignment(&self, assign: &[f64], x: &[f64]) -> Result<f64> {
        if assign.len() != self.contexts {
            return Err(Error::DimensionMismatch {
                expected: self.contexts,
                actual: assign.len(),
            });
        }
        let mut rate = 0.0;
        for (k, a) in assign.iter().enumerate() {
            rate += a * open_probability(&self.psi[k], x)?;
        }
        Ok(rate)
    }

    /// Reorder contexts by `perm` (new index k holds old context perm[k]) and
    /// re-pin so the last context's logits are zero again. Predictions are
    /// unchanged.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.contexts {
            return Err(Error::invalid("permutation length must equal M"));
        }
        let zero = vec![0.0; self.m];
        let full_row = |k: usize| -> &[f64] {
            if k + 1 == self.contexts {
                &zero
            } else {
                &self.theta[k]
            }
        };
        let last = full_row(perm[self.contexts - 1]).to_vec();
        let theta = (0..self.contexts - 1)
            .map(|k| {
                full_row(perm[k])
                    .iter()
                    .zip(&last)
                    .map(|(a, b)| a - b)
                    .collect()
            })
            .collect();
        let psi = perm.iter().map(|&k| self.psi[k].clone()).collect();
        Ok(MixtureParams {
            contexts: self.contexts,
            m: self.m,
            n: self.n,
            theta,
            psi,
            schema_hash: self.schema_hash.clone(),
        })
    }
}

/// Softmax context probabilities with the last context pinned to logit 0.
/// Entries are positive and sum to 1; logits are clamped at +/-35 first.
pub fn assignment_probs(theta: &[Vec<f64>], x_hat: &[f64]) -> Result<Vec<f64>> {
    let contexts = theta.len() + 1;
    let mut logits = Vec::with_capacity(contexts);
    for row in theta {
        if row.len() != x_hat.len() {
            return Err(Error::DimensionMismatch {
                expected: row.len(),
                actual: x_hat.len(),
            });
        }
        logits.push(dot(row, x_hat).clamp(-LOGIT_CLAMP, LOGIT_CLAMP));
    }
    logits.push(0.0);
    let lse = logsumexp(&logits);
    Ok(logits.iter().map(|l| (l - lse).exp()).collect())
}

/// Exact log context probabilities (no clamping), used in likelihood math.
pub(crate) fn log_assignment(theta: &[Vec<f64>], x_hat: &[f64]) -> Vec<f64> {
    let mut logits: Vec<f64> = theta.iter().map(|row| dot(row, x_hat)).collect();
    logits.push(0.0);
    let lse = logsumexp(&logits);
    logits.iter().map(|l| l - lse).collect()
}

/// Open probability of one context: P(y=1) = 1/(1+exp(psi_k.x)). The logit
/// is clamped so the result stays strictly inside (0, 1).
pub fn open_probability(psi_k: &[f64], x: &[f64]) -> Result<f64> {
    if psi_k.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: psi_k.len(),
            actual: x.len(),
        });
    }
    let t = dot(psi_k, x).clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    Ok(sigmoid(-t))
}

/// Exact log P(y | x, context k): -softplus(t) for opens, -softplus(-t)
/// otherwise, with t = psi_k.x.
pub(crate) fn label_logprob(psi_k: &[f64], x: &[f64], y: u8) -> f64 {
    label_logprob_t(dot(psi_k, x), y)
}

pub(crate) fn label_logprob_t(t: f64, y: u8) -> f64 {
    if y == 1 {
        -softplus(t)
    } else {
        -softplus(-t)
    }
}

/// Mean per-example observed-data log-likelihood.
pub fn log_likelihood(params: &MixtureParams, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    params.validate()?;
    let mut total = 0.0;
    let mut value = vec![0.0; params.contexts];
    for ex in examples {
        check_example_dims(params, ex)?;
        let la = log_assignment(&params.theta, &ex.x_hat);
        for k in 0..params.contexts {
            value[k] = la[k] + label_logprob(&params.psi[k], &ex.x, ex.y);
        }
        total += logsumexp(&value);
    }
    Ok(total / examples.len() as f64)
}

pub(crate) fn check_example_dims(params: &MixtureParams, ex: &Example) -> Result<()> {
    if ex.x_hat.len() != params.m {
        return Err(Error::DimensionMismatch {
            expected: params.m,
            actual: ex.x_hat.len(),
        });
    }
    if ex.x.len() != params.n {
        return Err(Error::DimensionMismatch {
            expected: params.n,
            actual: ex.x.len(),
        });
    }
    Ok(())
}

/// Posterior context probabilities, one row per example on the simplex.
#[derive(Debug, Clone)]
pub struct Responsibilities {
    pub examples: usize,
    pub contexts: usize,
    data: Vec<f64>,
}

impl Responsibilities {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let examples = rows.len();
        let contexts = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(examples * contexts);
        for row in &rows {
            if row.len() != contexts {
                return Err(Error::invalid("ragged responsibility rows"));
            }
            data.extend_from_slice(row);
        }
        let resp = Responsibilities {
            examples,
            contexts,
            data,
        };
        resp.validate()?;
        Ok(resp)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.contexts..(i + 1) * self.contexts]
    }

    /// Row-major view of the whole matrix.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.examples).map(|i| self.row(i)[k]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.examples {
            let row = self.row(i);
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::invalid(format!("responsibility out of [0,1] in row {i}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "responsibility row {i} sums to {sum}"
                )));
            }
        }
        Ok(())
    }
}

/// E-step: posterior of the hidden context per example, computed in log
/// space and normalized per row.
pub fn e_step(params: &MixtureParams, examples: &[Example]) -> Result<Responsibilities> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    params.validate()?;
    let contexts = params.contexts;
    let mut data = Vec::with_capacity(examples.len() * contexts);
    let mut value = vec![0.0; contexts];
    for ex in examples {
        check_example_dims(params, ex)?;
        let la = log_assignment(&params.theta, &ex.x_hat);
        for k in 0..contexts {
            value[k] = la[k] + label_logprob(&params.psi[k], &ex.x, ex.y);
        }
        let lse = logsumexp(&value);
        data.extend(value.iter().map(|v| (v - lse).exp()));
    }
    Ok(Responsibilities {
        examples: examples.len(),
        contexts,
        data,
    })
}

/// Expected complete-data log-likelihood of candidate parameters under fixed
/// responsibilities, minus an L2 penalty. Totals over examples.
pub fn q_value(
    params_new: &MixtureParams,
    resp: &Responsibilities,
    examples: &[Example],
    l2: f64,
) -> Result<f64> {
    params_new.validate()?;
    if resp.examples != examples.len() || resp.contexts != params_new.contexts {
        return Err(Error::invalid(
            "responsibilities do not match the examples/params shape",
        ));
    }
    let mut total = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        check_example_dims(params_new, ex)?;
        let la = log_assignment(&params_new.theta, &ex.x_hat);
        let row = resp.row(i);
        for k in 0..params_new.contexts {
            total += row[k] * (la[k] + label_logprob(&params_new.psi[k], &ex.x, ex.y));
        }
    }
    let penalty: f64 = params_new
        .theta
        .iter()
        .chain(params_new.psi.iter())
        .flatten()
        .map(|v| v * v)
        .sum();
    Ok(total - l2 * penalty)
}

/// Training configuration; tolerances follow the convergence threshold of
/// 1e-5 on the relative change of the mean per-example log-likelihood.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub contexts: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
    pub l2: f64,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
}

impl FitConfig {
    pub fn new(contexts: usize) -> Self {
        FitConfig {
            contexts,
            tol: 1e-5,
            max_iter: 200,
            restarts: 5,
            seed: 0,
            l2: 1e-6,
            inner_tol: 1e-8,
            inner_max_iter: 100,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.contexts == 0 {
            return Err(Error::invalid("context count must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tolerance must be positive"));
        }
        if self.restarts == 0 {
            return Err(Error::invalid("restarts must be at least 1"));
        }
        if self.l2 < 0.0 {
            return Err(Error::invalid("l2 strength must be non-negative"));
        }
        Ok(())
    }
}

/// One EM iteration record.
#[derive(Debug, Clone)]
pub struct EmIteration {
    pub iteration: usize,
    pub mean_loglik: f64,
    pub max_param_delta: f64,
    pub wall_secs: f64,
}

/// Per-fit trace: one record per EM iteration of the winning restart.
#[derive(Debug, Clone)]
pub struct EmTrace {
    pub iterations: Vec<EmIteration>,
    pub converged: bool,
    /// Index of the restart that won.
    pub restart: usize,
    /// Number of inner solves that returned without improving their block.
    pub degraded_steps: usize,
}

/// On-disk model format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub version: u32,
    #[serde(rename = "M")]
    pub contexts: usize,
    pub m: usize,
    pub n: usize,
    pub schema_hash: String,
    /// (M-1) x m, row-major.
    pub theta: Vec<f64>,
    /// M x n, row-major.
    pub psi: Vec<f64>,
    pub config: FitConfig,
    pub final_loglik: f64,
}

pub const MODEL_VERSION: u32 = 1;

/// Serialize a trained model as JSON. Reals use the shortest representation
/// that reloads bit-exactly.
pub fn save_model(
    mut w: impl Write,
    params: &MixtureParams,
    config: &FitConfig,
    final_loglik: f64,
) -> Result<()> {
    params.validate()?;
    let file = ModelFile {
        version: MODEL_VERSION,
        contexts: params.contexts,
        m: params.m,
        n: params.n,
        schema_hash: params.schema_hash.clone(),
        theta: params.theta.iter().flatten().copied().collect(),
        psi: params.psi.iter().flatten().copied().collect(),
        config: config.clone(),
        final_loglik,
    };
    serde_json::to_writer(&mut w, &file)?;
    writeln!(w)?;
    Ok(())
}

/// Load a model saved by [`save_model`].
pub fn load_model(r: impl Read) -> Result<(MixtureParams, FitConfig, f64)> {
    let file: ModelFile = serde_json::from_reader(r)?;
    if file.version != MODEL_VERSION {
        return Err(Error::Model(format!(
            "unsupported model version {}",
            file.version
        )));
    }
    if file.theta.len() != (file.contexts - 1) * file.m || file.psi.len() != file.contexts * file.n
    {
        return Err(Error::Model("parameter block sizes are inconsistent".into()));
    }
    let theta = file
        .theta
        .chunks(file.m.max(1))
        .map(|c| c.to_vec())
        .take(file.contexts - 1)
        .collect();
    let psi = file.psi.chunks(file.n).map(|c| c.to_vec()).collect();
    let params = MixtureParams {
        contexts: file.contexts,
        m: file.m,
        n: file.n,
        theta,
        psi,
        schema_hash: file.schema_hash,
    };
    params.validate()?;
    Ok((params, file.config, file.final_loglik))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN3: f64 = 1.0986122886681098;

    fn example(x_hat: Vec<f64>, x: Vec<f64>, y: u8) -> Example {
        Example {
            x_hat,
            x,
            y,
            user_id: "u".into(),
            anchor_item_id: "a".into(),
            pushed_item_id: "p".into(),
        }
    }

    #[test]
    fn assignment_zero_logits_are_uniform() {
        let theta = vec![vec![0.0, 0.0]];
        let probs = assignment_probs(&theta, &[1.0, 2.0]).unwrap();
        assert_abs_diff_eq!(probs[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(probs[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn assignment_ln3_logit() {
        let theta = vec![vec![LN3]];
        let probs = assignment_probs(&theta, &[1.0]).unwrap();
        assert_abs_diff_eq!(probs[0], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(probs[1], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn assignment_degenerate_mixture() {
        let probs = assignment_probs(&[], &[1.0, 2.0]).unwrap();
        assert_eq!(probs, vec![1.0]);
    }

    #[test]
    fn assignment_dimension_mismatch_is_an_error() {
        let theta = vec![vec![1.0, 2.0]];
        assert!(assignment_probs(&theta, &[1.0]).is_err());
    }

    #[test]
    fn open_probability_matches_closed_forms() {
        assert_abs_diff_eq!(open_probability(&[0.0], &[1.0]).unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(open_probability(&[LN3], &[1.0]).unwrap(), 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(open_probability(&[-LN3], &[1.0]).unwrap(), 0.75, epsilon = 1e-12);
    }

    #[test]
    fn predict_single_context_is_the_expert() {
        let mut p = MixtureParams::zeros(1, 2, 2);
        p.psi[0] = vec![0.7, -0.3];
        let (x_hat, x) = (vec![1.0, 0.5], vec![1.0, 2.0]);
        assert_abs_diff_eq!(
            p.predict_open_rate(&x_hat, &x).unwrap(),
            open_probability(&p.psi[0], &x).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn predict_averages_under_uniform_assignment() {
        let mut p = MixtureParams::zeros(2, 1, 1);
        // psi.x = ln(4) gives open prob 0.2; -ln(4) gives 0.8
        p.psi[0] = vec![4f64.ln()];
        p.psi[1] = vec![-(4f64.ln())];
        assert_abs_diff_eq!(
            p.predict_open_rate(&[1.0], &[1.0]).unwrap(),
            0.5,
            epsilon = 1e-12
        );
    }

    #[test]
    fn predict_collapses_when_experts_agree() {
        let mut a = MixtureParams::zeros(3, 2, 2);
        for k in 0..3 {
            a.psi[k] = vec![0.4, -0.9];
        }
        let mut b = a.clone();
        b.theta = vec![vec![2.0, -1.0], vec![-0.5, 0.25]];
        let (x_hat, x) = (vec![1.0, 0.7], vec![1.0, -0.2]);
        assert_abs_diff_eq!(
            a.predict_open_rate(&x_hat, &x).unwrap(),
            b.predict_open_rate(&x_hat, &x).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn loglik_of_coin_flip_model() {
        let p = MixtureParams::zeros(1, 1, 1);
        let examples = vec![
            example(vec![1.0], vec![1.0], 0),
            example(vec![1.0], vec![1.0], 1),
            example(vec![1.0], vec![1.0], 1),
        ];
        assert_abs_diff_eq!(
            log_likelihood(&p, &examples).unwrap(),
            0.5f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn loglik_approaches_zero_for_confident_correct_model() {
        let mut p = MixtureParams::zeros(1, 1, 1);
        p.psi[0] = vec![-20.0]; // P(y=1) ~ 1 - 2e-9
        let examples = vec![example(vec![1.0], vec![1.0], 1)];
        let ll = log_likelihood(&p, &examples).unwrap();
        assert!(ll < 0.0 && ll > -1e-8, "ll = {ll}");
    }

    #[test]
    fn loglik_matches_brute_force_on_fixture() {
        let mut p = MixtureParams::zeros(2, 2, 2);
        p.theta = vec![vec![0.3, -0.8]];
        p.psi = vec![vec![1.1, 0.4], vec![-0.6, 0.9]];
        let examples = vec![
            example(vec![1.0, 0.2], vec![1.0, -0.5], 1),
            example(vec![1.0, -1.0], vec![1.0, 0.8], 0),
            example(vec![1.0, 0.0], vec![1.0, 0.0], 1),
            example(vec![1.0, 2.0], vec![1.0, 1.5], 0),
        ];
        // brute force: direct sums in probability space
        let mut expected = 0.0;
        for ex in &examples {
            let t1 = p.theta[0][0] * ex.x_hat[0] + p.theta[0][1] * ex.x_hat[1];
            let z1 = t1.exp() / (1.0 + t1.exp());
            let z2 = 1.0 / (1.0 + t1.exp());
            let prob = |psi: &[f64]| {
                let t: f64 = psi[0] * ex.x[0] + psi[1] * ex.x[1];
                if ex.y == 1 {
                    1.0 / (1.0 + t.exp())
                } else {
                    t.exp() / (1.0 + t.exp())
                }
            };
            expected += (z1 * prob(&p.psi[0]) + z2 * prob(&p.psi[1])).ln();
        }
        expected /= examples.len() as f64;
        assert_abs_diff_eq!(log_likelihood(&p, &examples).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn loglik_rejects_empty_dataset() {
        let p = MixtureParams::zeros(1, 1, 1);
        assert!(log_likelihood(&p, &[]).is_err());
    }

    #[test]
    fn e_step_with_flat_label_likelihood_returns_prior() {
        let mut p = MixtureParams::zeros(2, 1, 1);
        p.theta = vec![vec![LN3]];
        // identical experts: label likelihood equal across contexts
        p.psi = vec![vec![0.4], vec![0.4]];
        let examples = vec![example(vec![1.0], vec![1.0], 1)];
        let resp = e_step(&p, &examples).unwrap();
        let prior = p.assignment_probs(&[1.0]).unwrap();
        assert_abs_diff_eq!(resp.row(0)[0], prior[0], epsilon = 1e-12);
        assert_abs_diff_eq!(resp.row(0)[1], prior[1], epsilon = 1e-12);
    }

    #[test]
    fn e_step_single_context_is_all_ones() {
        let p = MixtureParams::zeros(1, 1, 1);
        let examples = vec![
            example(vec![1.0], vec![1.0], 0),
            example(vec![1.0], vec![1.0], 1),
        ];
        let resp = e_step(&p, &examples).unwrap();
        assert_eq!(resp.row(0), &[1.0]);
        assert_eq!(resp.row(1), &[1.0]);
    }

    #[test]
    fn e_step_matches_brute_force_joint() {
        let mut p = MixtureParams::zeros(2, 2, 2);
        p.theta = vec![vec![0.5, -0.2]];
        p.psi = vec![vec![0.9, 0.1], vec![-1.2, 0.7]];
        let ex = example(vec![1.0, 0.6], vec![1.0, -0.4], 1);
        let resp = e_step(&p, std::slice::from_ref(&ex)).unwrap();
        let t = p.theta[0][0] * ex.x_hat[0] + p.theta[0][1] * ex.x_hat[1];
        let prior = [t.exp() / (1.0 + t.exp()), 1.0 / (1.0 + t.exp())];
        let like = |psi: &[f64]| {
            let s: f64 = psi[0] * ex.x[0] + psi[1] * ex.x[1];
            1.0 / (1.0 + s.exp())
        };
        let joint = [prior[0] * like(&p.psi[0]), prior[1] * like(&p.psi[1])];
        let norm = joint[0] + joint[1];
        assert_abs_diff_eq!(resp.row(0)[0], joint[0] / norm, epsilon = 1e-12);
        assert_abs_diff_eq!(resp.row(0)[1], joint[1] / norm, epsilon = 1e-12);
    }

    #[test]
    fn q_single_context_reduces_to_logistic_loglik() {
        let mut p = MixtureParams::zeros(1, 1, 2);
        p.psi[0] = vec![0.3, -0.7];
        let examples = vec![
            example(vec![1.0], vec![1.0, 0.4], 1),
            example(vec![1.0], vec![1.0, -0.6], 0),
        ];
        let resp = e_step(&p, &examples).unwrap();
        let q = q_value(&p, &resp, &examples, 0.0).unwrap();
        let direct: f64 = examples
            .iter()
            .map(|ex| label_logprob(&p.psi[0], &ex.x, ex.y))
            .sum();
        assert_abs_diff_eq!(q, direct, epsilon = 1e-12);
    }

    #[test]
    fn q_is_bounded_by_observed_loglik() {
        // Jensen: Q(params | params) <= N * mean observed loglik
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let contexts = rng.random_range(2..4usize);
            let m = 3;
            let n = 3;
            let mut p = MixtureParams::zeros(contexts, m, n);
            for row in p.theta.iter_mut().chain(p.psi.iter_mut()) {
                for v in row.iter_mut() {
                    *v = rng.random::<f64>() * 2.0 - 1.0;
                }
            }
            let examples: Vec<Example> = (0..15)
                .map(|_| {
                    example(
                        (0..m).map(|_| rng.random::<f64>() - 0.5).collect(),
                        (0..n).map(|_| rng.random::<f64>() - 0.5).collect(),
                        u8::from(rng.random::<f64>() < 0.5),
                    )
                })
                .collect();
            let resp = e_step(&p, &examples).unwrap();
            let q = q_value(&p, &resp, &examples, 0.0).unwrap();
            let ll = log_likelihood(&p, &examples).unwrap() * examples.len() as f64;
            assert!(q <= ll + 1e-9, "q {q} > ll {ll}");
        }
    }

    #[test]
    fn q_uniform_responsibilities_zero_theta() {
        let contexts = 4;
        let p = MixtureParams::zeros(contexts, 2, 2);
        let n_examples = 6;
        let rows = vec![vec![1.0 / contexts as f64; contexts]; n_examples];
        let resp = Responsibilities::from_rows(rows).unwrap();
        let examples: Vec<Example> = (0..n_examples)
            .map(|i| example(vec![1.0, i as f64], vec![0.0, 0.0], (i % 2) as u8))
            .collect();
        let q = q_value(&p, &resp, &examples, 0.0).unwrap();
        // psi = 0 and x = 0 makes the label term -N ln 2; assignment term is -N ln M
        let expected = -(n_examples as f64) * (contexts as f64).ln()
            - (n_examples as f64) * 2f64.ln();
        assert_abs_diff_eq!(q, expected, epsilon = 1e-12);
    }

    #[test]
    fn permutation_preserves_predictions() {
        let mut p = MixtureParams::zeros(3, 2, 2);
        p.theta = vec![vec![0.8, -0.1], vec![-0.4, 0.6]];
        p.psi = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.5]];
        let perm = p.permuted(&[2, 0, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let x_hat = vec![rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() * 4.0 - 2.0];
            let x = vec![rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() * 4.0 - 2.0];
            assert_abs_diff_eq!(
                p.predict_open_rate(&x_hat, &x).unwrap(),
                perm.predict_open_rate(&x_hat, &x).unwrap(),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn pinned_softmax_matches_full_softmax_reference() {
        // An M-logit softmax with all logits shifted by a constant equals the
        // pinned parameterization built by subtracting the last row.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let m = 3;
            let contexts = 4;
            let full: Vec<Vec<f64>> = (0..contexts)
                .map(|_| (0..m).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
                .collect();
            let x_hat: Vec<f64> = (0..m).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            // reference: softmax over raw logits
            let logits: Vec<f64> = full.iter().map(|r| dot(r, &x_hat)).collect();
            let lse = logsumexp(&logits);
            let reference: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
            // pinned: subtract last row from all
            let theta: Vec<Vec<f64>> = full[..contexts - 1]
                .iter()
                .map(|r| r.iter().zip(&full[contexts - 1]).map(|(a, b)| a - b).collect())
                .collect();
            let got = assignment_probs(&theta, &x_hat).unwrap();
            for k in 0..contexts {
                assert_abs_diff_eq!(got[k], reference[k], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn model_file_round_trips_bit_exactly() {
        let mut p = MixtureParams::zeros(3, 2, 4).with_schema_hash("abc123");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for row in p.theta.iter_mut().chain(p.psi.iter_mut()) {
            for v in row.iter_mut() {
                *v = rng.random::<f64>() * 10.0 - 5.0;
            }
        }
        let cfg = FitConfig::new(3).with_seed(17);
        let mut buf = Vec::new();
        save_model(&mut buf, &p, &cfg, -0.6234).unwrap();
        let (back, cfg_back, ll) = load_model(buf.as_slice()).unwrap();
        assert_eq!(back, p);
        assert_eq!(cfg_back.seed, 17);
        assert_eq!(ll.to_bits(), (-0.6234f64).to_bits());
        let mut buf2 = Vec::new();
        save_model(&mut buf2, &back, &cfg_back, ll).unwrap();
        assert_eq!(buf, buf2);
    }

    proptest! {
        #[test]
        fn assignment_probs_form_a_simplex(
            theta_flat in proptest::collection::vec(-50.0f64..50.0, 6),
            x_hat in proptest::collection::vec(-10.0f64..10.0, 3),
        ) {
            let theta: Vec<Vec<f64>> = theta_flat.chunks(3).map(|c| c.to_vec()).collect();
            let probs = assignment_probs(&theta, &x_hat).unwrap();
            let sum: f64 = probs.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(probs.iter().all(|&p| p > 0.0));
        }

        #[test]
        fn e_step_rows_sum_to_one(
            seed in 0u64..1000,
            contexts in 1usize..5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (m, n) = (3, 4);
            let mut p = MixtureParams::zeros(contexts, m, n);
            for row in p.theta.iter_mut().chain(p.psi.iter_mut()) {
                for v in row.iter_mut() {
                    *v = rng.random::<f64>() * 6.0 - 3.0;
                }
            }
            let examples: Vec<Example> = (0..20)
                .map(|_| example(
                    (0..m).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
                    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
                    u8::from(rng.random::<f64>() < 0.4),
                ))
                .collect();
            let resp = e_step(&p, &examples).unwrap();
            prop_assert!(resp.validate().is_ok());
        }
    }
}
