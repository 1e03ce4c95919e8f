//! Per-subclass learnable Gaussian sources with unit prototypes, trained
//! under the directional-compactness / path-cap / log-scale objective, plus
//! the weighted geometric diagnostics reported before and after.
//!
//! Parameters per subclass (c,k): source mean `mu`, log-scales `log_sigma`,
//! raw prototype `proto_raw` (normalized to a unit vector wherever
//! consumed), and a fixed radial cap `cap` that is computed once from the
//! data and never optimized. Gradients are analytic and checked against
//! finite differences in the tests.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::error::{Result, SubflowError};
use crate::rng::{derive_seed, derive_seed_indexed, rng_from_seed};
use crate::synthbench::LabeledSample;

const ZERO_NORM_EPS: f64 = 1e-12;
const PROTO_FALLBACK_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubclassSource {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    pub proto_raw: Vec<f64>,
    /// 99th-percentile distance to the class center; frozen at computation.
    pub cap: f64,
}

impl SubclassSource {
    pub fn prototype(&self) -> Vec<f64> {
        normalize_or_axis(&self.proto_raw)
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|l| l.exp()).collect()
    }
}

/// All learned sources, keyed by (class, subclass).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SourceParams {
    pub entries: BTreeMap<(usize, usize), SubclassSource>,
}

#[derive(Serialize, Deserialize)]
struct SourceRecord {
    class: usize,
    subclass: usize,
    #[serde(flatten)]
    source: SubclassSource,
}

impl Serialize for SourceParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let records: Vec<SourceRecord> = self
            .entries
            .iter()
            .map(|(&(class, subclass), source)| SourceRecord {
                class,
                subclass,
                source: source.clone(),
            })
            .collect();
        records.serialize(s)
    }
}

impl<'de> Deserialize<'de> for SourceParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let records = Vec::<SourceRecord>::deserialize(d)?;
        Ok(Self {
            entries: records
                .into_iter()
                .map(|r| ((r.class, r.subclass), r.source))
                .collect(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptConfig {
    pub steps: usize,
    pub lambda_out: f64,
    pub lambda_path: f64,
    pub lambda_det: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            steps: 2500,
            lambda_out: 1.0,
            lambda_path: 0.1,
            lambda_det: 0.1,
            batch_size: 256,
            learning_rate: 1e-2,
            seed: 0,
        }
    }
}

/// Sample-share-weighted directional alignment and radial spread of the
/// displacements d = x1 - x0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeometryDiagnostics {
    pub cos_mean_w: f64,
    pub r_rel_w: f64,
    /// (class, subclass) -> (cos_mean, r_rel); stored as rows for JSON.
    #[serde(with = "per_subclass_serde")]
    pub per_subclass: BTreeMap<(usize, usize), (f64, f64)>,
}

mod per_subclass_serde {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<(usize, usize), (f64, f64)>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let rows: Vec<(usize, usize, f64, f64)> = map
            .iter()
            .map(|(&(c, k), &(cos, r))| (c, k, cos, r))
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<(usize, usize), (f64, f64)>, D::Error> {
        let rows = Vec::<(usize, usize, f64, f64)>::deserialize(d)?;
        Ok(rows.into_iter().map(|(c, k, cos, r)| ((c, k), (cos, r))).collect())
    }
}

fn normalize_or_axis(w: &[f64]) -> Vec<f64> {
    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < PROTO_FALLBACK_EPS {
        let mut axis = vec![0.0; w.len()];
        axis[0] = 1.0;
        axis
    } else {
        w.iter().map(|x| x / norm).collect()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Nearest-rank quantile: the ceil(q*n)-th order statistic.
pub fn nearest_rank_quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(SubflowError::EmptyGroup("quantile of empty set".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1])
}

/// r_cap per (c,k): nearest-rank 99th percentile of distances from assigned
/// samples to the class center. Computed once; immutable afterward.
pub fn compute_caps(
    samples: &[LabeledSample],
    centers: &BTreeMap<usize, Vec<f64>>,
) -> Result<BTreeMap<(usize, usize), f64>> {
    let mut distances: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for s in samples {
        let k = s.subclass.ok_or_else(|| {
            SubflowError::InvalidInput("compute_caps requires subclass assignments".into())
        })?;
        let center = centers
            .get(&s.class)
            .ok_or_else(|| SubflowError::EmptyGroup(format!("no center for class {}", s.class)))?;
        let dist = s
            .x1
            .iter()
            .zip(center)
            .map(|(x, c)| (x - c) * (x - c))
            .sum::<f64>()
            .sqrt();
        distances.entry((s.class, k)).or_default().push(dist);
    }
    let mut caps = BTreeMap::new();
    for (key, dists) in distances {
        caps.insert(key, nearest_rank_quantile(&dists, 0.99)?);
    }
    Ok(caps)
}

/// Reparameterized source draw: x0 = mu + exp(log_sigma) * z.
pub fn sample_source(source: &SubclassSource, z: &[f64]) -> Result<Vec<f64>> {
    if z.iter().any(|x| !x.is_finite()) {
        return Err(SubflowError::NonFinite("source noise".into()));
    }
    Ok(source
        .mu
        .iter()
        .zip(&source.log_sigma)
        .zip(z)
        .map(|((m, l), zi)| m + l.exp() * zi)
        .collect())
}

/// Mean of 1 - <d/||d||, v> over the batch; near-zero-norm displacements
/// are skipped and counted.
pub fn loss_out(displacements: &[Vec<f64>], prototype: &[f64]) -> (f64, usize) {
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for d in displacements {
        let r = norm(d);
        if r < ZERO_NORM_EPS {
            skipped += 1;
            continue;
        }
        total += 1.0 - dot(d, prototype) / r;
        used += 1;
    }
    if used == 0 {
        (0.0, skipped)
    } else {
        (total / used as f64, skipped)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean of softplus(||d||/cap - 1)^2 over the batch.
pub fn loss_path(displacements: &[Vec<f64>], cap: f64) -> Result<f64> {
    if cap <= 0.0 {
        return Err(SubflowError::InvalidInput("non-positive cap".into()));
    }
    if displacements.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = displacements
        .iter()
        .map(|d| softplus(norm(d) / cap - 1.0).powi(2))
        .sum();
    Ok(total / displacements.len() as f64)
}

/// Mean over subclasses of ||log_sigma||^2.
pub fn loss_det(log_sigmas: &[&[f64]]) -> f64 {
    if log_sigmas.is_empty() {
        return 0.0;
    }
    log_sigmas
        .iter()
        .map(|l| l.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        / log_sigmas.len() as f64
}

/// One batch element: a target sample, its subclass, and the fixed standard
/// normal draw used for reparameterization.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub x1: Vec<f64>,
    pub key: (usize, usize),
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct SubclassGrad {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    pub proto_raw: Vec<f64>,
}

/// Total loss lambda_out*L_out + lambda_path*L_path + lambda_det*L_det on a
/// batch, with x0 reparameterized from the current source.
pub fn total_loss(batch: &[BatchItem], params: &SourceParams, config: &OptConfig) -> Result<f64> {
    Ok(loss_and_grads(batch, params, config)?.0)
}

/// Loss plus analytic gradients with respect to every subclass's mu,
/// log_sigma, and proto_raw. L_out and L_path average over batch items
/// (L_out over the non-degenerate ones); L_det averages over all subclasses
/// in `params`.
pub fn loss_and_grads(
    batch: &[BatchItem],
    params: &SourceParams,
    config: &OptConfig,
) -> Result<(f64, BTreeMap<(usize, usize), SubclassGrad>)> {
    let mut grads: BTreeMap<(usize, usize), SubclassGrad> = params
        .entries
        .iter()
        .map(|(&key, src)| {
            let d = src.mu.len();
            (
                key,
                SubclassGrad {
                    mu: vec![0.0; d],
                    log_sigma: vec![0.0; d],
                    proto_raw: vec![0.0; d],
                },
            )
        })
        .collect();

    // First pass: count non-degenerate displacements for the L_out mean.
    let mut out_used = 0usize;
    let mut items: Vec<(usize, Vec<f64>, f64)> = Vec::with_capacity(batch.len());
    for (idx, item) in batch.iter().enumerate() {
        let src = params
            .entries
            .get(&item.key)
            .ok_or(SubflowError::MissingSource(item.key.0, item.key.1))?;
        let x0 = sample_source(src, &item.z)?;
        let d: Vec<f64> = item.x1.iter().zip(&x0).map(|(a, b)| a - b).collect();
        let r = norm(&d);
        if r >= ZERO_NORM_EPS {
            out_used += 1;
        }
        items.push((idx, d, r));
    }

    let n_path = batch.len().max(1) as f64;
    let n_out = out_used.max(1) as f64;
    let mut l_out = 0.0;
    let mut l_path = 0.0;

    for (idx, d, r) in &items {
        let item = &batch[*idx];
        let src = &params.entries[&item.key];
        if src.cap <= 0.0 {
            return Err(SubflowError::InvalidInput(format!(
                "non-positive cap for subclass {:?}",
                item.key
            )));
        }
        let grad = grads.get_mut(&item.key).unwrap();
        let dim = d.len();

        // dL/dd accumulated over the angular and path terms.
        let mut dl_dd = vec![0.0; dim];

        if *r >= ZERO_NORM_EPS {
            let u: Vec<f64> = d.iter().map(|x| x / r).collect();
            let v = src.prototype();
            let uv = dot(&u, &v);
            l_out += (1.0 - uv) / n_out;
            let w_out = config.lambda_out / n_out;
            for i in 0..dim {
                // d(1 - u.v)/dd = -(v - (u.v) u) / r
                dl_dd[i] += w_out * (-(v[i] - uv * u[i]) / r);
            }
            // d(1 - u.v)/dw = -(u - (u.v) v) / ||w|| (zero when the raw
            // prototype degenerated to the fallback axis).
            let wnorm = norm(&src.proto_raw);
            if wnorm >= PROTO_FALLBACK_EPS {
                for i in 0..dim {
                    grad.proto_raw[i] += w_out * (-(u[i] - uv * v[i]) / wnorm);
                }
            }
        }

        let arg = r / src.cap - 1.0;
        let sp = softplus(arg);
        l_path += sp * sp / n_path;
        if *r >= ZERO_NORM_EPS {
            let w_path = config.lambda_path / n_path;
            let coeff = w_path * 2.0 * sp * sigmoid(arg) / src.cap;
            for i in 0..dim {
                dl_dd[i] += coeff * d[i] / r;
            }
        }

        // dd/dmu = -I; dd/dlog_sigma_i = -exp(log_sigma_i) * z_i.
        for i in 0..dim {
            grad.mu[i] -= dl_dd[i];
            grad.log_sigma[i] -= dl_dd[i] * src.log_sigma[i].exp() * item.z[i];
        }
    }

    let n_sub = params.entries.len().max(1) as f64;
    let log_sigmas: Vec<&[f64]> = params
        .entries
        .values()
        .map(|s| s.log_sigma.as_slice())
        .collect();
    let l_det = loss_det(&log_sigmas);
    for (key, src) in &params.entries {
        let grad = grads.get_mut(key).unwrap();
        for i in 0..src.log_sigma.len() {
            grad.log_sigma[i] += config.lambda_det * 2.0 * src.log_sigma[i] / n_sub;
        }
    }

    let total =
        config.lambda_out * l_out + config.lambda_path * l_path + config.lambda_det * l_det;
    Ok((total, grads))
}

/// Initialize sources: mu at the class center, unit scales, prototype along
/// the subclass's mean residual direction (first axis when degenerate).
/// Caps must already be computed.
pub fn init_sources(
    models: &BTreeMap<usize, crate::gmm::GmmModel>,
    caps: &BTreeMap<(usize, usize), f64>,
) -> Result<SourceParams> {
    let mut entries = BTreeMap::new();
    for (&c, model) in models {
        for k in 0..model.k {
            let cap = *caps
                .get(&(c, k))
                .ok_or_else(|| SubflowError::EmptyGroup(format!("no cap for ({c},{k})")))?;
            entries.insert(
                (c, k),
                SubclassSource {
                    mu: model.class_center.clone(),
                    log_sigma: vec![0.0; model.class_center.len()],
                    proto_raw: normalize_or_axis(&model.means[k]),
                    cap,
                },
            );
        }
    }
    Ok(SourceParams { entries })
}

/// Optimization output: final parameters, per-step loss trace, and the
/// geometric diagnostics before and after.
#[derive(Debug, Clone)]
pub struct OptResult {
    pub params: SourceParams,
    pub trace: Vec<f64>,
    pub before: GeometryDiagnostics,
    pub after: GeometryDiagnostics,
}

fn flatten(params: &SourceParams) -> Vec<f64> {
    let mut flat = Vec::new();
    for src in params.entries.values() {
        flat.extend_from_slice(&src.mu);
        flat.extend_from_slice(&src.log_sigma);
        flat.extend_from_slice(&src.proto_raw);
    }
    flat
}

fn unflatten(params: &mut SourceParams, flat: &[f64]) {
    let mut i = 0;
    for src in params.entries.values_mut() {
        let d = src.mu.len();
        src.mu.copy_from_slice(&flat[i..i + d]);
        src.log_sigma.copy_from_slice(&flat[i + d..i + 2 * d]);
        src.proto_raw.copy_from_slice(&flat[i + 2 * d..i + 3 * d]);
        i += 3 * d;
    }
}

fn flatten_grads(
    params: &SourceParams,
    grads: &BTreeMap<(usize, usize), SubclassGrad>,
) -> Vec<f64> {
    let mut flat = Vec::new();
    for (key, src) in &params.entries {
        let g = &grads[key];
        let _ = src;
        flat.extend_from_slice(&g.mu);
        flat.extend_from_slice(&g.log_sigma);
        flat.extend_from_slice(&g.proto_raw);
    }
    flat
}

/// Minimize the combined objective by Adam over all subclasses jointly.
/// Prototypes are re-normalized to unit length after every step; caps are
/// never touched. Aborts on NaN gradients.
pub fn optimize_sources(
    samples: &[LabeledSample],
    init: &SourceParams,
    config: &OptConfig,
) -> Result<OptResult> {
    let assigned: Vec<&LabeledSample> =
        samples.iter().filter(|s| s.subclass.is_some()).collect();
    if assigned.is_empty() {
        return Err(SubflowError::EmptyGroup("optimize_sources: no assigned samples".into()));
    }
    let dim = assigned[0].x1.len();
    let mut params = init.clone();
    let before = geometry_diagnostics(samples, &params, derive_seed(config.seed, "diag"))?;

    let mut flat = flatten(&params);
    let mut adam = Adam::new(config.learning_rate, flat.len());
    let mut rng = rng_from_seed(derive_seed(config.seed, "sourceopt"));
    let mut trace = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let batch: Vec<BatchItem> = (0..config.batch_size)
            .map(|_| {
                let s = assigned[rng.gen_range(0..assigned.len())];
                let z: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                BatchItem {
                    x1: s.x1.clone(),
                    key: (s.class, s.subclass.unwrap()),
                    z,
                }
            })
            .collect();
        let (loss, grads) = loss_and_grads(&batch, &params, config)?;
        let flat_grads = flatten_grads(&params, &grads);
        if flat_grads.iter().any(|g| !g.is_finite()) {
            return Err(SubflowError::NonFinite(format!(
                "gradient at optimization step {step}"
            )));
        }
        adam.step(&mut flat, &flat_grads);
        unflatten(&mut params, &flat);
        for src in params.entries.values_mut() {
            src.proto_raw = normalize_or_axis(&src.proto_raw);
        }
        flat = flatten(&params);
        trace.push(loss);
    }

    let after = geometry_diagnostics(samples, &params, derive_seed(config.seed, "diag"))?;
    Ok(OptResult {
        params,
        trace,
        before,
        after,
    })
}

/// Diagnostics core over already-formed displacements per subclass.
fn diagnostics_from_displacements(
    groups: &BTreeMap<(usize, usize), Vec<Vec<f64>>>,
    params: &SourceParams,
) -> Result<GeometryDiagnostics> {
    let total: usize = groups.values().map(|g| g.len()).sum();
    if total == 0 {
        return Err(SubflowError::EmptyGroup("diagnostics on empty data".into()));
    }
    let mut cos_w = 0.0;
    let mut rrel_w = 0.0;
    let mut per_subclass = BTreeMap::new();
    for (key, ds) in groups {
        let src = params
            .entries
            .get(key)
            .ok_or(SubflowError::MissingSource(key.0, key.1))?;
        let v = src.prototype();
        let mut cos_sum = 0.0;
        let mut radii = Vec::with_capacity(ds.len());
        for d in ds {
            let r = norm(d);
            radii.push(r);
            if r >= ZERO_NORM_EPS {
                cos_sum += dot(d, &v) / r;
            }
        }
        let n = ds.len() as f64;
        let cos_mean = cos_sum / n;
        let r_mean = radii.iter().sum::<f64>() / n;
        if r_mean < ZERO_NORM_EPS {
            return Err(SubflowError::InvalidInput(format!(
                "zero mean displacement norm for subclass {key:?}"
            )));
        }
        let r_var = radii.iter().map(|r| (r - r_mean) * (r - r_mean)).sum::<f64>() / n;
        let r_rel = r_var.sqrt() / r_mean;
        per_subclass.insert(*key, (cos_mean, r_rel));
        let share = n / total as f64;
        cos_w += share * cos_mean;
        rrel_w += share * r_rel;
    }
    Ok(GeometryDiagnostics {
        cos_mean_w: cos_w,
        r_rel_w: rrel_w,
        per_subclass,
    })
}

/// Weighted directional alignment and radial spread with one fixed-seed
/// source draw per sample.
pub fn geometry_diagnostics(
    samples: &[LabeledSample],
    params: &SourceParams,
    eval_seed: u64,
) -> Result<GeometryDiagnostics> {
    let mut groups: BTreeMap<(usize, usize), Vec<Vec<f64>>> = BTreeMap::new();
    for (i, s) in samples.iter().filter(|s| s.subclass.is_some()).enumerate() {
        let key = (s.class, s.subclass.unwrap());
        let src = params
            .entries
            .get(&key)
            .ok_or(SubflowError::MissingSource(key.0, key.1))?;
        let mut rng = rng_from_seed(derive_seed_indexed(eval_seed, "diag-sample", i as u64));
        let z: Vec<f64> = (0..s.x1.len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let x0 = sample_source(src, &z)?;
        let d: Vec<f64> = s.x1.iter().zip(&x0).map(|(a, b)| a - b).collect();
        groups.entry(key).or_default().push(d);
    }
    diagnostics_from_displacements(&groups, params)
}

/// Per-subclass mean displacement norm with fixed-seed draws; used by the
/// norm-inflation checks.
pub fn mean_displacement_norms(
    samples: &[LabeledSample],
    params: &SourceParams,
    eval_seed: u64,
) -> Result<BTreeMap<(usize, usize), f64>> {
    let mut sums: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for (i, s) in samples.iter().filter(|s| s.subclass.is_some()).enumerate() {
        let key = (s.class, s.subclass.unwrap());
        let src = params
            .entries
            .get(&key)
            .ok_or(SubflowError::MissingSource(key.0, key.1))?;
        let mut rng = rng_from_seed(derive_seed_indexed(eval_seed, "diag-sample", i as u64));
        let z: Vec<f64> = (0..s.x1.len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let x0 = sample_source(src, &z)?;
        let d: Vec<f64> = s.x1.iter().zip(&x0).map(|(a, b)| a - b).collect();
        let entry = sums.entry(key).or_insert((0.0, 0));
        entry.0 += norm(&d);
        entry.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(k, (sum, n))| (k, sum / n as f64))
        .collect())
}
