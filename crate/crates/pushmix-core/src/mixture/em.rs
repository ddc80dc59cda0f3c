//! EM training: weighted M-steps backed by the L-BFGS solver, multi-restart
//! fitting, and finite-difference gradient validation.
//!
//! Both M-steps only improve (never maximize exactly) their block of the
//! penalized Q function, and the solver never returns a point worse than its
//! warm start, so each EM cycle cannot decrease the penalized observed
//! likelihood.
//!
//! Feature vectors are flattened into contiguous row-major buffers once per
//! fit; every inner objective walks those buffers instead of per-example
//! allocations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::Example;
use crate::mixture::solver::{minimize, SolverOptions, SolverStatus};
use crate::mixture::{
    check_example_dims, dot, e_step, label_logprob_t, logsumexp, sigmoid, EmIteration, EmTrace,
    FitConfig, MixtureParams, Responsibilities,
};
use crate::rng::{mix_seed, sample_unit_exp};

/// Row-major copies of the example features.
struct Dataset {
    n: usize,
    /// assignment feature dimension
    m: usize,
    /// prediction feature dimension
    d: usize,
    x_hat: Vec<f64>,
    x: Vec<f64>,
    y: Vec<u8>,
}

impl Dataset {
    fn from_examples(examples: &[Example]) -> Self {
        let n = examples.len();
        let m = examples.first().map(|e| e.x_hat.len()).unwrap_or(0);
        let d = examples.first().map(|e| e.x.len()).unwrap_or(0);
        let mut x_hat = Vec::with_capacity(n * m);
        let mut x = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n);
        for ex in examples {
            x_hat.extend_from_slice(&ex.x_hat);
            x.extend_from_slice(&ex.x);
            y.push(ex.y);
        }
        Dataset { n, m, d, x_hat, x, y }
    }

    fn x_hat_row(&self, i: usize) -> &[f64] {
        &self.x_hat[i * self.m..(i + 1) * self.m]
    }

    fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }
}

/// Assignment-block objective and gradient at `theta` (flattened (M-1) x m),
/// scaled by `scale`: scale * (sum_i sum_k r_ik log P(k|x_hat_i) - l2 |theta|^2).
/// `resp` is row-major with `contexts` entries per example.
fn theta_objective(
    theta_flat: &[f64],
    resp: &[f64],
    contexts: usize,
    ds: &Dataset,
    l2: f64,
    scale: f64,
) -> (f64, Vec<f64>) {
    let m = ds.m;
    let free = contexts - 1;
    let mut value = 0.0;
    let mut grad = vec![0.0; theta_flat.len()];
    let mut logits = vec![0.0f64; contexts];
    for i in 0..ds.n {
        let xh = ds.x_hat_row(i);
        for j in 0..free {
            logits[j] = dot(&theta_flat[j * m..(j + 1) * m], xh);
        }
        logits[free] = 0.0;
        let lse = logsumexp(&logits);
        let r = &resp[i * contexts..(i + 1) * contexts];
        for k in 0..contexts {
            value += r[k] * (logits[k] - lse);
        }
        for j in 0..free {
            let coeff = r[j] - (logits[j] - lse).exp();
            for (g, xv) in grad[j * m..(j + 1) * m].iter_mut().zip(xh) {
                *g += coeff * xv;
            }
        }
    }
    for (g, t) in grad.iter_mut().zip(theta_flat) {
        *g = scale * (*g - 2.0 * l2 * t);
    }
    value = scale * (value - l2 * theta_flat.iter().map(|t| t * t).sum::<f64>());
    (value, grad)
}

/// Prediction-block objective and gradient for one context's weights:
/// scale * (sum_i w_i log P(y_i|x_i, psi) - l2 |psi|^2).
fn psi_objective(psi: &[f64], weights: &[f64], ds: &Dataset, l2: f64, scale: f64) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let mut grad = vec![0.0; psi.len()];
    for i in 0..ds.n {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        let xv = ds.x_row(i);
        let t = dot(psi, xv);
        value += w * label_logprob_t(t, ds.y[i]);
        let coeff = w * ((1.0 - ds.y[i] as f64) - sigmoid(t));
        for (g, x) in grad.iter_mut().zip(xv) {
            *g += coeff * x;
        }
    }
    for (g, p) in grad.iter_mut().zip(psi) {
        *g = scale * (*g - 2.0 * l2 * p);
    }
    value = scale * (value - l2 * psi.iter().map(|p| p * p).sum::<f64>());
    (value, grad)
}

/// One pass computing both the posterior responsibilities at the current
/// parameters and the mean observed log-likelihood.
fn posterior_and_loglik(
    theta_flat: &[f64],
    psi_flat: &[f64],
    contexts: usize,
    ds: &Dataset,
    resp: &mut [f64],
) -> f64 {
    let (m, d) = (ds.m, ds.d);
    let free = contexts - 1;
    let mut value = vec![0.0f64; contexts];
    let mut total = 0.0;
    for i in 0..ds.n {
        let xh = ds.x_hat_row(i);
        for j in 0..free {
            value[j] = dot(&theta_flat[j * m..(j + 1) * m], xh);
        }
        value[free] = 0.0;
        let lse_assign = logsumexp(&value);
        let xv = ds.x_row(i);
        for k in 0..contexts {
            let t = dot(&psi_flat[k * d..(k + 1) * d], xv);
            value[k] += label_logprob_t(t, ds.y[i]) - lse_assign;
        }
        let lse = logsumexp(&value);
        total += lse;
        for k in 0..contexts {
            resp[i * contexts + k] = (value[k] - lse).exp();
        }
    }
    total / ds.n as f64
}

fn solver_options(cfg: &FitConfig) -> SolverOptions {
    SolverOptions {
        grad_tol: cfg.inner_tol,
        max_iter: cfg.inner_max_iter,
        history: 7,
    }
}

fn solve_theta(
    resp: &[f64],
    contexts: usize,
    ds: &Dataset,
    init: &[f64],
    cfg: &FitConfig,
) -> (Vec<f64>, SolverStatus) {
    let scale = 1.0 / ds.n as f64;
    let f = |t: &[f64]| {
        let (v, g) = theta_objective(t, resp, contexts, ds, cfg.l2, scale);
        (-v, g.into_iter().map(|x| -x).collect())
    };
    let (x, _, status) = minimize(f, init, &solver_options(cfg));
    (x, status)
}

fn solve_psi(
    weights: &[f64],
    ds: &Dataset,
    init: &[f64],
    cfg: &FitConfig,
) -> (Vec<f64>, SolverStatus) {
    let scale = 1.0 / ds.n as f64;
    let f = |p: &[f64]| {
        let (v, g) = psi_objective(p, weights, ds, cfg.l2, scale);
        (-v, g.into_iter().map(|x| -x).collect())
    };
    let (x, _, status) = minimize(f, init, &solver_options(cfg));
    (x, status)
}

/// Weighted multinomial logistic fit with soft targets: maximizes the
/// assignment block of the Q function. Returns the new rows and the solver
/// status; the result never scores below the warm start.
pub fn m_step_theta(
    resp: &Responsibilities,
    examples: &[Example],
    init: &[Vec<f64>],
    cfg: &FitConfig,
) -> (Vec<Vec<f64>>, SolverStatus) {
    let contexts = resp.contexts;
    if contexts == 1 {
        return (
            Vec::new(),
            SolverStatus {
                converged: true,
                iterations: 0,
                grad_norm: 0.0,
                improved: false,
            },
        );
    }
    let ds = Dataset::from_examples(examples);
    let init_flat: Vec<f64> = init.iter().flatten().copied().collect();
    let (x, status) = solve_theta(resp.as_slice(), contexts, &ds, &init_flat, cfg);
    (x.chunks(ds.m).map(|c| c.to_vec()).collect(), status)
}

/// Weighted binary logistic fit for one context: maximizes that context's
/// prediction block of the Q function.
pub fn m_step_psi(
    weights: &[f64],
    examples: &[Example],
    init: &[f64],
    cfg: &FitConfig,
) -> (Vec<f64>, SolverStatus) {
    let ds = Dataset::from_examples(examples);
    solve_psi(weights, &ds, init, cfg)
}

fn validate_examples(examples: &[Example], cfg: &FitConfig) -> Result<(usize, usize)> {
    let first = examples.first().ok_or(Error::EmptyDataset)?;
    let (m, n) = (first.x_hat.len(), first.x.len());
    if examples.len() < cfg.contexts {
        return Err(Error::invalid(format!(
            "need at least M = {} examples, got {}",
            cfg.contexts,
            examples.len()
        )));
    }
    for ex in examples {
        ex.validate()?;
        if ex.x_hat.len() != m || ex.x.len() != n {
            return Err(Error::invalid("examples have inconsistent dimensions"));
        }
    }
    Ok((m, n))
}

fn relative_change(current: f64, previous: f64) -> f64 {
    (current - previous).abs() / previous.abs().max(1e-12)
}

struct RestartOutcome {
    params: MixtureParams,
    trace: EmTrace,
    final_loglik: f64,
}

fn run_restart(ds: &Dataset, cfg: &FitConfig, restart: usize) -> Result<RestartOutcome> {
    let contexts = cfg.contexts;
    let (m, d, n) = (ds.m, ds.d, ds.n);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, restart as u64));

    // symmetric Dirichlet(1) responsibilities, then a first M-step
    let mut resp = vec![0.0f64; n * contexts];
    for row in resp.chunks_mut(contexts) {
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = sample_unit_exp(&mut rng);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }

    let mut theta = vec![0.0f64; (contexts - 1) * m];
    let mut psi = vec![0.0f64; contexts * d];
    let mut degraded = 0usize;
    let mut weights = vec![0.0f64; n];

    let m_steps = |theta: &mut Vec<f64>,
                       psi: &mut Vec<f64>,
                       resp: &[f64],
                       weights: &mut Vec<f64>,
                       degraded: &mut usize|
     -> f64 {
        let mut delta = 0.0f64;
        if contexts > 1 {
            let (new_theta, status) = solve_theta(resp, contexts, ds, theta, cfg);
            if !status.converged && !status.improved {
                *degraded += 1;
            }
            for (a, b) in new_theta.iter().zip(theta.iter()) {
                delta = delta.max((a - b).abs());
            }
            *theta = new_theta;
        }
        for k in 0..contexts {
            for i in 0..n {
                weights[i] = resp[i * contexts + k];
            }
            let (new_psi, status) = solve_psi(weights, ds, &psi[k * d..(k + 1) * d], cfg);
            if !status.converged && !status.improved {
                *degraded += 1;
            }
            for (a, b) in new_psi.iter().zip(&psi[k * d..(k + 1) * d]) {
                delta = delta.max((a - b).abs());
            }
            psi[k * d..(k + 1) * d].copy_from_slice(&new_psi);
        }
        delta
    };

    let mut delta = m_steps(&mut theta, &mut psi, &resp, &mut weights, &mut degraded);

    let mut trace = Vec::new();
    let mut previous: Option<f64> = None;
    let mut converged = false;
    let started = std::time::Instant::now();
    for iteration in 0..=cfg.max_iter {
        let mean_loglik = posterior_and_loglik(&theta, &psi, contexts, ds, &mut resp);
        trace.push(EmIteration {
            iteration,
            mean_loglik,
            max_param_delta: delta,
            wall_secs: started.elapsed().as_secs_f64(),
        });
        if let Some(prev) = previous {
            if relative_change(mean_loglik, prev) < cfg.tol {
                converged = true;
                break;
            }
        }
        if iteration == cfg.max_iter {
            break;
        }
        previous = Some(mean_loglik);
        delta = m_steps(&mut theta, &mut psi, &resp, &mut weights, &mut degraded);
    }
    let final_loglik = trace.last().map(|t| t.mean_loglik).unwrap_or(f64::NEG_INFINITY);
    Ok(RestartOutcome {
        params: MixtureParams {
            contexts,
            m,
            n: d,
            theta: theta.chunks(m).map(|c| c.to_vec()).take(contexts - 1).collect(),
            psi: psi.chunks(d).map(|c| c.to_vec()).collect(),
            schema_hash: String::new(),
        },
        trace: EmTrace {
            iterations: trace,
            converged,
            restart,
            degraded_steps: degraded,
        },
        final_loglik,
    })
}

/// Fit the mixture by EM with multiple restarts; restarts run in parallel and
/// the one with the best final likelihood wins (ties: lowest restart index).
pub fn em_fit(examples: &[Example], cfg: &FitConfig) -> Result<(MixtureParams, EmTrace)> {
    cfg.validate()?;
    validate_examples(examples, cfg)?;
    let ds = Dataset::from_examples(examples);
    let outcomes: Vec<Result<RestartOutcome>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|restart| run_restart(&ds, cfg, restart))
        .collect();
    let mut best: Option<RestartOutcome> = None;
    for outcome in outcomes {
        let outcome = outcome?;
        let better = match &best {
            None => true,
            Some(b) => outcome.final_loglik > b.final_loglik,
        };
        if better {
            best = Some(outcome);
        }
    }
    let best = best.expect("at least one restart");
    Ok((best.params, best.trace))
}

/// Which block of the Q-function objective to check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientTarget {
    Assignment,
    Prediction,
    Joint,
}

/// Compare the analytic gradient of the Q objective against central finite
/// differences (step 1e-5) at `params`. Returns the max over coordinates of
/// |analytic - numeric| / max(1, |analytic|).
pub fn gradient_check(
    target: GradientTarget,
    params: &MixtureParams,
    examples: &[Example],
    l2: f64,
) -> Result<f64> {
    params.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for ex in examples {
        check_example_dims(params, ex)?;
    }
    let resp = e_step(params, examples)?;
    let resp_flat = resp.as_slice();
    let ds = Dataset::from_examples(examples);
    let (n_dim, contexts) = (params.n, params.contexts);

    let theta_flat: Vec<f64> = params.theta.iter().flatten().copied().collect();
    let psi_flat: Vec<f64> = params.psi.iter().flatten().copied().collect();
    let theta_len = theta_flat.len();

    let mut weights = vec![vec![0.0f64; ds.n]; contexts];
    for i in 0..ds.n {
        for k in 0..contexts {
            weights[k][i] = resp_flat[i * contexts + k];
        }
    }

    let objective = |point: &[f64]| -> (f64, Vec<f64>) {
        match target {
            GradientTarget::Assignment => {
                theta_objective(point, resp_flat, contexts, &ds, l2, 1.0)
            }
            GradientTarget::Prediction => {
                let mut value = 0.0;
                let mut grad = Vec::with_capacity(point.len());
                for k in 0..contexts {
                    let psi_k = &point[k * n_dim..(k + 1) * n_dim];
                    let (v, g) = psi_objective(psi_k, &weights[k], &ds, l2, 1.0);
                    value += v;
                    grad.extend(g);
                }
                (value, grad)
            }
            GradientTarget::Joint => {
                let (tv, tg) =
                    theta_objective(&point[..theta_len], resp_flat, contexts, &ds, l2, 1.0);
                let mut value = tv;
                let mut grad = tg;
                for k in 0..contexts {
                    let base = theta_len + k * n_dim;
                    let psi_k = &point[base..base + n_dim];
                    let (v, g) = psi_objective(psi_k, &weights[k], &ds, l2, 1.0);
                    value += v;
                    grad.extend(g);
                }
                (value, grad)
            }
        }
    };

    let point: Vec<f64> = match target {
        GradientTarget::Assignment => theta_flat.clone(),
        GradientTarget::Prediction => psi_flat.clone(),
        GradientTarget::Joint => theta_flat.iter().chain(psi_flat.iter()).copied().collect(),
    };
    let (_, analytic) = objective(&point);
    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let (up, _) = objective(&probe);
        probe[i] = point[i] - step;
        let (down, _) = objective(&probe);
        probe[i] = point[i];
        let numeric = (up - down) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
