//! Per-class diagonal Gaussian mixtures on residual latents, EBIC model
//! selection with a minimum subclass size, and hard assignment.
//!
//! Mixtures are fit by EM on residuals `x1 - class_center` with
//! k-means++-style seeding, a variance floor, and a fixed number of
//! restarts. Model selection scans K = 1..K_max and keeps the
//! EBIC-minimizing fit whose hard assignment leaves no subclass below
//! `min_size`; K = 1 always survives.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SubflowError};
use crate::rng::{derive_seed_indexed, rng_from_seed};
use crate::synthbench::LabeledSample;

pub const VARIANCE_FLOOR: f64 = 1e-6;
const EM_TOL: f64 = 1e-6;
const EM_MAX_ITERS: usize = 200;
const EM_RESTARTS: u64 = 3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmModel {
    pub k: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
    /// Class center the residuals were taken against.
    pub class_center: Vec<f64>,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmConfig {
    pub k_max: usize,
    pub gamma: f64,
    pub min_size: usize,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            k_max: 6,
            gamma: 0.5,
            min_size: 50,
        }
    }
}

/// Per-class model-selection record: EBIC for every candidate K plus which
/// candidates were discarded by the minimum-size constraint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EbicTable {
    pub class: usize,
    pub entries: Vec<EbicEntry>,
    pub chosen_k: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EbicEntry {
    pub k: usize,
    pub log_likelihood: f64,
    pub ebic: f64,
    pub min_subclass: usize,
    pub rejected_by_min_size: bool,
}

/// Coordinate-wise arithmetic mean.
pub fn class_center(samples: &[&LabeledSample]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(SubflowError::EmptyGroup("class_center on empty class".into()));
    }
    let d = samples[0].x1.len();
    let mut center = vec![0.0; d];
    for s in samples {
        for (c, &x) in center.iter_mut().zip(s.x1.iter()) {
            *c += x;
        }
    }
    for c in &mut center {
        *c /= samples.len() as f64;
    }
    Ok(center)
}

fn log_component_density(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..x.len() {
        let diff = x[i] - mean[i];
        acc += -0.5 * ((2.0 * std::f64::consts::PI * var[i]).ln() + diff * diff / var[i]);
    }
    acc
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// k-means++-style seeding: first center uniform, subsequent centers drawn
/// with probability proportional to squared distance to the nearest chosen
/// center.
fn kmeanspp_means<R: Rng>(residuals: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = residuals.len();
    let mut means = Vec::with_capacity(k);
    means.push(residuals[rng.gen_range(0..n)].clone());
    let mut d2 = vec![0.0f64; n];
    for _ in 1..k {
        let mut total = 0.0;
        for (i, r) in residuals.iter().enumerate() {
            let best = means
                .iter()
                .map(|m| sq_dist(r, m))
                .fold(f64::INFINITY, f64::min);
            d2[i] = best;
            total += best;
        }
        let next = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let u: f64 = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        means.push(residuals[next].clone());
    }
    means
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn em_once<R: Rng>(
    residuals: &[Vec<f64>],
    k: usize,
    rng: &mut R,
    trace: Option<&mut Vec<f64>>,
) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>, f64) {
    let n = residuals.len();
    let d = residuals[0].len();

    let mut means = kmeanspp_means(residuals, k, rng);
    let mut weights = vec![1.0 / k as f64; k];
    // Initialize every component at the pooled diagonal variance.
    let pooled_mean = {
        let mut m = vec![0.0; d];
        for r in residuals {
            for (mi, &x) in m.iter_mut().zip(r) {
                *mi += x;
            }
        }
        m.iter().map(|x| x / n as f64).collect::<Vec<_>>()
    };
    let mut pooled_var = vec![0.0; d];
    for r in residuals {
        for i in 0..d {
            let diff = r[i] - pooled_mean[i];
            pooled_var[i] += diff * diff;
        }
    }
    for v in &mut pooled_var {
        *v = (*v / n as f64).max(VARIANCE_FLOOR);
    }
    let mut vars = vec![pooled_var.clone(); k];

    let mut log_lik = f64::NEG_INFINITY;
    let mut resp = vec![vec![0.0f64; k]; n];
    let mut local_trace = Vec::new();
    for _ in 0..EM_MAX_ITERS {
        // E-step in the log domain.
        let mut new_ll = 0.0;
        for (i, r) in residuals.iter().enumerate() {
            let logp: Vec<f64> = (0..k)
                .map(|j| weights[j].max(1e-300).ln() + log_component_density(r, &means[j], &vars[j]))
                .collect();
            let lse = log_sum_exp(&logp);
            new_ll += lse;
            for j in 0..k {
                resp[i][j] = (logp[j] - lse).exp();
            }
        }
        local_trace.push(new_ll);
        let improved = new_ll - log_lik;
        log_lik = new_ll;
        if improved.abs() < EM_TOL {
            break;
        }
        // M-step.
        for j in 0..k {
            let nj: f64 = resp.iter().map(|r| r[j]).sum();
            let nj_safe = nj.max(1e-12);
            weights[j] = nj / n as f64;
            for t in 0..d {
                let mu: f64 = residuals
                    .iter()
                    .enumerate()
                    .map(|(i, r)| resp[i][j] * r[t])
                    .sum::<f64>()
                    / nj_safe;
                means[j][t] = mu;
            }
            for t in 0..d {
                let var: f64 = residuals
                    .iter()
                    .enumerate()
                    .map(|(i, r)| {
                        let diff = r[t] - means[j][t];
                        resp[i][j] * diff * diff
                    })
                    .sum::<f64>()
                    / nj_safe;
                vars[j][t] = var.max(VARIANCE_FLOOR);
            }
        }
    }
    if let Some(out) = trace {
        *out = local_trace;
    }
    (weights, means, vars, log_lik)
}

/// Fit a diagonal GMM to residuals by EM with restarts; keeps the best
/// log-likelihood. `K = 1` uses the closed-form mean/variance.
pub fn fit_diag_gmm(residuals: &[Vec<f64>], k: usize, seed: u64) -> Result<GmmModel> {
    fit_diag_gmm_traced(residuals, k, seed, None)
}

/// As [`fit_diag_gmm`], optionally exposing the per-iteration
/// log-likelihood trace of the winning restart.
pub fn fit_diag_gmm_traced(
    residuals: &[Vec<f64>],
    k: usize,
    seed: u64,
    trace: Option<&mut Vec<f64>>,
) -> Result<GmmModel> {
    if k < 1 {
        return Err(SubflowError::InvalidInput("K must be >= 1".into()));
    }
    let n = residuals.len();
    if n < k {
        return Err(SubflowError::InvalidInput(format!(
            "need at least K={k} samples, got {n}"
        )));
    }
    let d = residuals[0].len();
    if residuals.iter().any(|r| r.iter().any(|x| !x.is_finite())) {
        return Err(SubflowError::NonFinite("residual input to GMM fit".into()));
    }

    if k == 1 {
        let mut mean = vec![0.0; d];
        for r in residuals {
            for (m, &x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for r in residuals {
            for t in 0..d {
                let diff = r[t] - mean[t];
                var[t] += diff * diff;
            }
        }
        for v in &mut var {
            *v = (*v / n as f64).max(VARIANCE_FLOOR);
        }
        let ll: f64 = residuals
            .iter()
            .map(|r| log_component_density(r, &mean, &var))
            .sum();
        if let Some(out) = trace {
            *out = vec![ll];
        }
        return Ok(GmmModel {
            k: 1,
            weights: vec![1.0],
            means: vec![mean],
            vars: vec![var],
            class_center: vec![0.0; d],
            log_likelihood: ll,
        });
    }

    let mut best: Option<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>, f64, Vec<f64>)> = None;
    for restart in 0..EM_RESTARTS {
        let mut rng = rng_from_seed(derive_seed_indexed(seed, "em-restart", restart));
        let mut run_trace = Vec::new();
        let (w, m, v, ll) = em_once(residuals, k, &mut rng, Some(&mut run_trace));
        if best.as_ref().map_or(true, |b| ll > b.3) {
            best = Some((w, m, v, ll, run_trace));
        }
    }
    let (weights, means, vars, log_likelihood, best_trace) = best.unwrap();
    if let Some(out) = trace {
        *out = best_trace;
    }
    Ok(GmmModel {
        k,
        weights,
        means,
        vars,
        class_center: vec![0.0; d],
        log_likelihood,
    })
}

/// EBIC = -2 logL + p ln(n) + 2 gamma p ln(D), p = (K-1) + 2KD; lower is better.
pub fn ebic_score(model: &GmmModel, n: usize, gamma: f64) -> Result<f64> {
    if n < 2 {
        return Err(SubflowError::InvalidInput("EBIC needs n >= 2".into()));
    }
    let d = model.means[0].len();
    let p = ((model.k - 1) + 2 * model.k * d) as f64;
    Ok(-2.0 * model.log_likelihood + p * (n as f64).ln() + 2.0 * gamma * p * (d as f64).ln())
}

/// Hard assignment of a residual: argmax over component posteriors, ties to
/// the smallest index.
pub fn hard_assign_residual(residual: &[f64], model: &GmmModel) -> Result<usize> {
    if residual.iter().any(|x| !x.is_finite()) {
        return Err(SubflowError::NonFinite("hard_assign input".into()));
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for j in 0..model.k {
        let score = model.weights[j].max(1e-300).ln()
            + log_component_density(residual, &model.means[j], &model.vars[j]);
        if score > best_score {
            best_score = score;
            best = j;
        }
    }
    Ok(best)
}

/// Hard assignment of a raw point `x1` against the model's class center.
pub fn hard_assign(x1: &[f64], model: &GmmModel) -> Result<usize> {
    let residual: Vec<f64> = x1
        .iter()
        .zip(&model.class_center)
        .map(|(x, c)| x - c)
        .collect();
    hard_assign_residual(&residual, model)
}

/// Scan K = 1..K_max, drop candidates whose hard assignment produces a
/// subclass smaller than `min_size`, return the EBIC-minimizing survivor
/// together with the full candidate table.
pub fn select_num_components(
    residuals: &[Vec<f64>],
    config: &GmmConfig,
    seed: u64,
) -> Result<(GmmModel, Vec<EbicEntry>)> {
    if residuals.is_empty() {
        return Err(SubflowError::EmptyGroup("select_num_components".into()));
    }
    let n = residuals.len();
    let mut entries = Vec::new();
    let mut best: Option<(f64, GmmModel)> = None;
    for k in 1..=config.k_max.max(1) {
        if n < k {
            break;
        }
        let model = fit_diag_gmm(residuals, k, derive_seed_indexed(seed, "k", k as u64))?;
        let mut counts = vec![0usize; k];
        for r in residuals {
            counts[hard_assign_residual(r, &model)?] += 1;
        }
        let min_subclass = counts.iter().copied().min().unwrap_or(0);
        let score = ebic_score(&model, n, config.gamma)?;
        let rejected = k > 1 && min_subclass < config.min_size;
        entries.push(EbicEntry {
            k,
            log_likelihood: model.log_likelihood,
            ebic: score,
            min_subclass,
            rejected_by_min_size: rejected,
        });
        if !rejected && best.as_ref().map_or(true, |(s, _)| score < *s) {
            best = Some((score, model));
        }
    }
    Ok((best.unwrap().1, entries))
}

/// Fitted models plus assignments for a whole dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubclassAssignment {
    /// Per-class empirical subclass weights p(k|c).
    pub weights: BTreeMap<usize, Vec<f64>>,
    /// Per-(class, subclass) counts.
    pub counts: BTreeMap<usize, Vec<usize>>,
}

/// Fit per-class mixtures on residuals, select K by EBIC, and write hard
/// subclass labels into the samples. Per-class fits use seeds derived from
/// (seed, class id) and are order-independent.
pub fn fit_subclasses(
    samples: &mut [LabeledSample],
    config: &GmmConfig,
    seed: u64,
) -> Result<(BTreeMap<usize, GmmModel>, SubclassAssignment, Vec<EbicTable>)> {
    let class_ids: Vec<usize> = {
        let mut ids: Vec<usize> = samples.iter().map(|s| s.class).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    };
    let mut models = BTreeMap::new();
    let mut tables = Vec::new();
    for &c in &class_ids {
        let class_samples: Vec<&LabeledSample> =
            samples.iter().filter(|s| s.class == c).collect();
        let center = class_center(&class_samples)?;
        let residuals: Vec<Vec<f64>> = class_samples
            .iter()
            .map(|s| s.x1.iter().zip(&center).map(|(x, m)| x - m).collect())
            .collect();
        let (mut model, entries) =
            select_num_components(&residuals, config, derive_seed_indexed(seed, "class", c as u64))?;
        model.class_center = center;
        tables.push(EbicTable {
            class: c,
            chosen_k: model.k,
            entries,
        });
        models.insert(c, model);
    }

    let mut counts: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for s in samples.iter_mut() {
        let model = &models[&s.class];
        let k = hard_assign(&s.x1, model)?;
        s.subclass = Some(k);
        counts
            .entry(s.class)
            .or_insert_with(|| vec![0; model.k])[k] += 1;
    }
    let weights = subclass_weights(&counts);
    Ok((models, SubclassAssignment { weights, counts }, tables))
}

/// p(k|c) = n_{c,k} / n_c.
pub fn subclass_weights(counts: &BTreeMap<usize, Vec<usize>>) -> BTreeMap<usize, Vec<f64>> {
    counts
        .iter()
        .map(|(&c, per_k)| {
            let total: usize = per_k.iter().sum();
            (
                c,
                per_k.iter().map(|&n| n as f64 / total as f64).collect(),
            )
        })
        .collect()
}
