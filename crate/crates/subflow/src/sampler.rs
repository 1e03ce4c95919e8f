//! Class-conditional generation: draw a subclass from the empirical mixture
//! weights, a starting point from its source, and integrate the velocity
//! field from t=0 to t=1.
//!
//! Each generated sample uses an RNG stream derived from (seed, sample
//! index), so parallel and serial generation agree bit-for-bit.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SubflowError};
use crate::fm::{Cond, Conditioning, SourceMode, VelocityField};
use crate::rng::{derive_seed_indexed, rng_from_seed};
use crate::sourceopt::SourceParams;
use crate::synthbench::LabeledSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Euler,
    /// Heun's midpoint variant, for convergence studies.
    Heun,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRequest {
    pub class: usize,
    pub count: usize,
    pub steps: usize,
    pub seed: u64,
    pub conditioning: Conditioning,
    pub source: SourceMode,
    pub integrator: Integrator,
}

impl SampleRequest {
    pub fn new(class: usize, count: usize, seed: u64) -> Self {
        Self {
            class,
            count,
            steps: 64,
            seed,
            conditioning: Conditioning::Subclass,
            source: SourceMode::Learned,
            integrator: Integrator::Euler,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.count < 1 || self.steps < 1 {
            return Err(SubflowError::InvalidInput(
                "sample request needs count >= 1 and steps >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Explicit Euler (or Heun) integration of the velocity field from t=0 to
/// t=1 with step 1/steps.
pub fn euler_integrate(
    field: &VelocityField,
    x0: &[f64],
    cond: Cond,
    steps: usize,
    integrator: Integrator,
) -> Result<Vec<f64>> {
    let h = 1.0 / steps as f64;
    let mut x = x0.to_vec();
    for i in 0..steps {
        let t = i as f64 * h;
        let v = field.eval(&x, t, cond)?;
        match integrator {
            Integrator::Euler => {
                for (xi, vi) in x.iter_mut().zip(&v) {
                    *xi += h * vi;
                }
            }
            Integrator::Heun => {
                let mut x_pred = x.clone();
                for (xi, vi) in x_pred.iter_mut().zip(&v) {
                    *xi += h * vi;
                }
                let t_next = ((i + 1) as f64 * h).min(1.0);
                let v_next = field.eval(&x_pred, t_next, cond)?;
                for j in 0..x.len() {
                    x[j] += 0.5 * h * (v[j] + v_next[j]);
                }
            }
        }
        if x.iter().any(|xi| !xi.is_finite()) {
            return Err(SubflowError::NonFinite(format!(
                "trajectory diverged at integration step {i}"
            )));
        }
    }
    Ok(x)
}

/// Generate `count` samples of one class as a mixture over its subclasses.
/// Returns the points together with the subclass drawn for each.
pub fn sample_class(
    field: &VelocityField,
    sources: Option<&SourceParams>,
    weights: &[f64],
    request: &SampleRequest,
) -> Result<Vec<(Vec<f64>, usize)>> {
    request.validate()?;
    if weights.is_empty() {
        return Err(SubflowError::InvalidInput("empty subclass weights".into()));
    }
    let wsum: f64 = weights.iter().sum();
    if weights.iter().any(|&w| w < 0.0) || (wsum - 1.0).abs() > 1e-9 {
        return Err(SubflowError::InvalidInput(format!(
            "subclass weights not a simplex (sum {wsum})"
        )));
    }
    let dim = field.dim;
    let mut out = Vec::with_capacity(request.count);
    for i in 0..request.count {
        let mut rng = rng_from_seed(derive_seed_indexed(request.seed, "gen", i as u64));
        let k = {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = weights.len() - 1;
            for (j, &w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = j;
                    break;
                }
            }
            pick
        };
        let z: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x0 = match request.source {
            SourceMode::Standard => z,
            SourceMode::Learned => {
                let src = sources
                    .and_then(|p| p.entries.get(&(request.class, k)))
                    .ok_or(SubflowError::MissingSource(request.class, k))?;
                crate::sourceopt::sample_source(src, &z)?
            }
        };
        let cond = match request.conditioning {
            Conditioning::Coarse => Cond::Coarse(request.class),
            Conditioning::Subclass => Cond::Sub(request.class, k),
        };
        let x1 = euler_integrate(field, &x0, cond, request.steps, request.integrator)?;
        out.push((x1, k));
    }
    Ok(out)
}

/// Generate `target - n_c` synthetic rows per augmented class and merge
/// them with the real rows. Real rows are untouched; synthetic rows carry
/// the drawn subclass and `synthetic = true`.
pub fn synthesize_augmentation(
    field: &VelocityField,
    sources: Option<&SourceParams>,
    weights: &BTreeMap<usize, Vec<f64>>,
    synthetic_counts: &BTreeMap<usize, usize>,
    real: &[LabeledSample],
    request_template: &SampleRequest,
) -> Result<Vec<LabeledSample>> {
    let mut merged = real.to_vec();
    for (&class, &n_syn) in synthetic_counts {
        if n_syn == 0 {
            continue;
        }
        let w = weights
            .get(&class)
            .ok_or_else(|| SubflowError::EmptyGroup(format!("no weights for class {class}")))?;
        let request = SampleRequest {
            class,
            count: n_syn,
            seed: derive_seed_indexed(request_template.seed, "aug-class", class as u64),
            ..request_template.clone()
        };
        for (x1, k) in sample_class(field, sources, w, &request)? {
            merged.push(LabeledSample {
                x1,
                class,
                true_mode: None,
                subclass: Some(k),
                synthetic: true,
            });
        }
    }
    Ok(merged)
}
