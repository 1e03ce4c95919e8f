//! Generation fidelity, mode coverage, subclass validity, and downstream
//! classification metrics.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::error::{Result, SubflowError};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sourceopt::GeometryDiagnostics;
use crate::synthbench::{ClassSpec, LabeledSample};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub frechet_per_class: BTreeMap<usize, f64>,
    pub mode_recall_per_class: BTreeMap<usize, f64>,
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    pub balanced_accuracy_real_only: Option<f64>,
    pub macro_f1_real_only: Option<f64>,
    pub knn_purity_learned: Option<f64>,
    pub knn_purity_random: Option<f64>,
    pub geometry: Option<GeometryDiagnosticsSnapshot>,
}

/// Flattened diagnostics for serialization (per-subclass detail dropped).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeometryDiagnosticsSnapshot {
    pub cos_mean_w_before: f64,
    pub r_rel_w_before: f64,
    pub cos_mean_w_after: f64,
    pub r_rel_w_after: f64,
}

impl GeometryDiagnosticsSnapshot {
    pub fn from_pair(before: &GeometryDiagnostics, after: &GeometryDiagnostics) -> Self {
        Self {
            cos_mean_w_before: before.cos_mean_w,
            r_rel_w_before: before.r_rel_w,
            cos_mean_w_after: after.cos_mean_w,
            r_rel_w_after: after.r_rel_w,
        }
    }
}

fn mean_and_cov(points: &[&[f64]]) -> (Vec<f64>, DMatrix<f64>) {
    let n = points.len();
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for i in 0..d {
            mean[i] += p[i];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = DMatrix::zeros(d, d);
    for p in points {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (p[i] - mean[i]) * (p[j] - mean[j]);
            }
        }
    }
    cov /= n as f64;
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let sqrt_vals = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * sqrt_vals * eig.eigenvectors.transpose()
}

/// Squared 2-Wasserstein distance between Gaussian fits of two sample sets:
/// ||m1-m2||^2 + tr(C1 + C2 - 2 (C1 C2)^{1/2}), with the cross term
/// computed through the symmetric square root. Near-singular covariances
/// are regularized by 1e-8 I; the flag reports whether that happened.
pub fn gaussian_frechet_flagged(real: &[&[f64]], gen: &[&[f64]]) -> Result<(f64, bool)> {
    let d = real
        .first()
        .ok_or_else(|| SubflowError::EmptyGroup("frechet: empty real set".into()))?
        .len();
    if gen.is_empty() {
        return Err(SubflowError::EmptyGroup("frechet: empty generated set".into()));
    }
    if real.len() < d + 1 || gen.len() < d + 1 {
        return Err(SubflowError::InvalidInput(format!(
            "frechet needs at least D+1 = {} samples per side",
            d + 1
        )));
    }
    let (m1, mut c1) = mean_and_cov(real);
    let (m2, mut c2) = mean_and_cov(gen);
    let mut regularized = false;
    for c in [&mut c1, &mut c2] {
        let min_eig = c
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < 1e-10 {
            for i in 0..d {
                c[(i, i)] += 1e-8;
            }
            regularized = true;
        }
    }
    let mean_term: f64 = m1.iter().zip(&m2).map(|(a, b)| (a - b) * (a - b)).sum();
    // tr((C1 C2)^{1/2}) via the symmetric form sqrt(sqrt(C1) C2 sqrt(C1)).
    let c1_sqrt = sym_sqrt(&c1);
    let inner = &c1_sqrt * &c2 * &c1_sqrt;
    let cross = sym_sqrt(&inner).trace();
    let dist = mean_term + c1.trace() + c2.trace() - 2.0 * cross;
    Ok((dist.max(0.0), regularized))
}

pub fn gaussian_frechet(real: &[&[f64]], gen: &[&[f64]]) -> Result<f64> {
    gaussian_frechet_flagged(real, gen).map(|(d, _)| d)
}

/// Fraction of ground-truth modes that receive at least `min_share` of the
/// generated samples within `rho` mode standard deviations of the mode
/// mean (diagonal Mahalanobis ball).
pub fn mode_recall(
    gen: &[&[f64]],
    class_spec: &ClassSpec,
    rho: f64,
    min_share: f64,
) -> Result<f64> {
    if gen.is_empty() {
        return Err(SubflowError::EmptyGroup("mode_recall: no generated samples".into()));
    }
    let n = gen.len() as f64;
    let mut recalled = 0usize;
    for mode in &class_spec.modes {
        let inside = gen
            .iter()
            .filter(|x| {
                let m2: f64 = x
                    .iter()
                    .zip(&mode.mean)
                    .zip(&mode.var)
                    .map(|((xi, mi), vi)| (xi - mi) * (xi - mi) / vi)
                    .sum();
                m2.sqrt() <= rho
            })
            .count() as f64;
        if inside / n >= min_share {
            recalled += 1;
        }
    }
    Ok(recalled as f64 / class_spec.modes.len() as f64)
}

/// Multinomial logistic regression trained by full-batch adaptive gradient
/// descent; deterministic. Returns (balanced accuracy, macro-F1) on the
/// test set.
pub fn train_downstream(
    train: &[LabeledSample],
    test: &[LabeledSample],
    seed: u64,
) -> Result<(f64, f64)> {
    let classes: Vec<usize> = {
        let mut c: Vec<usize> = test.iter().map(|s| s.class).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    for &c in &classes {
        if !train.iter().any(|s| s.class == c) {
            return Err(SubflowError::EmptyGroup(format!(
                "class {c} absent from training set"
            )));
        }
    }
    let model = LogisticModel::fit(train, &classes, seed)?;
    let predictions: Vec<usize> = test.iter().map(|s| model.predict(&s.x1)).collect();
    let truth: Vec<usize> = test.iter().map(|s| s.class).collect();
    Ok(classification_metrics(&truth, &predictions, &classes))
}

/// Balanced accuracy (mean per-class recall) and macro-F1 over the given
/// class list.
pub fn classification_metrics(
    truth: &[usize],
    predictions: &[usize],
    classes: &[usize],
) -> (f64, f64) {
    let mut bacc = 0.0;
    let mut macro_f1 = 0.0;
    for &c in classes {
        let tp = truth
            .iter()
            .zip(predictions)
            .filter(|(&t, &p)| t == c && p == c)
            .count() as f64;
        let fn_ = truth
            .iter()
            .zip(predictions)
            .filter(|(&t, &p)| t == c && p != c)
            .count() as f64;
        let fp = truth
            .iter()
            .zip(predictions)
            .filter(|(&t, &p)| t != c && p == c)
            .count() as f64;
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        bacc += recall;
        macro_f1 += f1;
    }
    (bacc / classes.len() as f64, macro_f1 / classes.len() as f64)
}

struct LogisticModel {
    classes: Vec<usize>,
    /// (D+1) x C weights, last row is the bias.
    weights: Vec<f64>,
    dim: usize,
}

impl LogisticModel {
    fn fit(train: &[LabeledSample], classes: &[usize], seed: u64) -> Result<Self> {
        if train.is_empty() {
            return Err(SubflowError::EmptyGroup("logistic fit on empty set".into()));
        }
        let dim = train[0].x1.len();
        let n_class = classes.len();
        let class_idx: BTreeMap<usize, usize> =
            classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let n_params = (dim + 1) * n_class;
        let mut rng = rng_from_seed(derive_seed(seed, "logreg-init"));
        let mut weights: Vec<f64> = (0..n_params)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.01 * z
            })
            .collect();
        let mut adam = Adam::new(0.1, n_params);
        let mut grads = vec![0.0; n_params];
        let mut probs = vec![0.0; n_class];
        for _ in 0..300 {
            grads.iter_mut().for_each(|g| *g = 0.0);
            for s in train {
                softmax_probs(&weights, &s.x1, dim, n_class, &mut probs);
                let y = class_idx[&s.class];
                for c in 0..n_class {
                    let err = probs[c] - if c == y { 1.0 } else { 0.0 };
                    for j in 0..dim {
                        grads[j * n_class + c] += err * s.x1[j] / train.len() as f64;
                    }
                    grads[dim * n_class + c] += err / train.len() as f64;
                }
            }
            adam.step(&mut weights, &grads);
        }
        Ok(Self {
            classes: classes.to_vec(),
            weights,
            dim,
        })
    }

    fn predict(&self, x: &[f64]) -> usize {
        let n_class = self.classes.len();
        let mut probs = vec![0.0; n_class];
        softmax_probs(&self.weights, x, self.dim, n_class, &mut probs);
        let mut best = 0;
        for c in 1..n_class {
            if probs[c] > probs[best] {
                best = c;
            }
        }
        self.classes[best]
    }
}

fn softmax_probs(weights: &[f64], x: &[f64], dim: usize, n_class: usize, out: &mut [f64]) {
    for c in 0..n_class {
        let mut logit = weights[dim * n_class + c];
        for j in 0..dim {
            logit += weights[j * n_class + c] * x[j];
        }
        out[c] = logit;
    }
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Fixed seeded random linear projection used as the kNN embedding; kept
/// independent of the GMM fit.
pub fn random_projection(dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from_seed(derive_seed(seed, "knn-projection"));
    (0..dim)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z
                })
                .collect()
        })
        .collect()
}

fn project(x: &[f64], proj: &[Vec<f64>]) -> Vec<f64> {
    proj.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Weighted kNN subclass purity: for each sample, the fraction of its k
/// nearest within-class neighbors (in the projected embedding) sharing its
/// subclass label; averaged over all samples of all usable classes.
pub fn knn_purity(
    samples: &[LabeledSample],
    labels: &BTreeMap<usize, Vec<usize>>,
    proj: &[Vec<f64>],
    k: usize,
) -> Result<f64> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.class).or_default().push(i);
    }
    let mut purity_sum = 0.0;
    let mut counted = 0usize;
    for (&class, idxs) in &by_class {
        if idxs.len() < k + 1 {
            return Err(SubflowError::InvalidInput(format!(
                "class {class} has fewer than k+1 = {} samples",
                k + 1
            )));
        }
        let class_labels = labels
            .get(&class)
            .ok_or_else(|| SubflowError::EmptyGroup(format!("no labels for class {class}")))?;
        if class_labels.len() != idxs.len() {
            return Err(SubflowError::InvalidInput(format!(
                "label count mismatch for class {class}"
            )));
        }
        let embedded: Vec<Vec<f64>> = idxs.iter().map(|&i| project(&samples[i].x1, proj)).collect();
        for (a, ea) in embedded.iter().enumerate() {
            let mut dists: Vec<(f64, usize)> = embedded
                .iter()
                .enumerate()
                .filter(|(b, _)| *b != a)
                .map(|(b, eb)| {
                    let d: f64 = ea.iter().zip(eb).map(|(x, y)| (x - y) * (x - y)).sum();
                    (d, b)
                })
                .collect();
            dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let share = dists
                .iter()
                .take(k)
                .filter(|(_, b)| class_labels[*b] == class_labels[a])
                .count() as f64
                / k as f64;
            purity_sum += share;
            counted += 1;
        }
    }
    Ok(purity_sum / counted as f64)
}

/// Subclass labels of a dataset grouped per class, in sample order.
pub fn subclass_labels(samples: &[LabeledSample]) -> Result<BTreeMap<usize, Vec<usize>>> {
    let mut labels: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for s in samples {
        let k = s
            .subclass
            .ok_or_else(|| SubflowError::InvalidInput("sample without subclass label".into()))?;
        labels.entry(s.class).or_default().push(k);
    }
    Ok(labels)
}

/// Per-class uniform permutation of the subclass labels, preserving the
/// per-subclass counts exactly.
pub fn matched_random_partition(
    labels: &BTreeMap<usize, Vec<usize>>,
    seed: u64,
) -> BTreeMap<usize, Vec<usize>> {
    let mut out = BTreeMap::new();
    for (&class, per_class) in labels {
        let mut shuffled = per_class.clone();
        let mut rng = rng_from_seed(crate::rng::derive_seed_indexed(
            seed,
            "shuffle-class",
            class as u64,
        ));
        shuffled.shuffle(&mut rng);
        out.insert(class, shuffled);
    }
    out
}

/// Split real samples of each class into train/test with a class-balanced
/// test set of `test_per_class` samples, by seeded shuffle.
pub fn balanced_split(
    samples: &[LabeledSample],
    test_per_class: usize,
    seed: u64,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    let mut by_class: BTreeMap<usize, Vec<&LabeledSample>> = BTreeMap::new();
    for s in samples.iter().filter(|s| !s.synthetic) {
        by_class.entry(s.class).or_default().push(s);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (&class, members) in &by_class {
        if members.len() <= test_per_class {
            return Err(SubflowError::InvalidInput(format!(
                "class {class} too small for a {test_per_class}-sample test split"
            )));
        }
        let mut order: Vec<usize> = (0..members.len()).collect();
        let mut rng = rng_from_seed(crate::rng::derive_seed_indexed(
            seed,
            "split-class",
            class as u64,
        ));
        order.shuffle(&mut rng);
        for (rank, &i) in order.iter().enumerate() {
            if rank < test_per_class {
                test.push(members[i].clone());
            } else {
                train.push(members[i].clone());
            }
        }
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthbench::ModeSpec;

    fn views(points: &[Vec<f64>]) -> Vec<&[f64]> {
        points.iter().map(|p| p.as_slice()).collect()
    }

    fn gaussian_points(mean: [f64; 2], std: f64, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| {
                mean.iter()
                    .map(|&m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + std * z
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn frechet_identical_sets_zero() {
        let points = gaussian_points([1.0, -2.0], 1.0, 500, 3);
        let v = views(&points);
        let d = gaussian_frechet(&v, &v).unwrap();
        assert!(d.abs() < 1e-9, "{d}");
    }

    #[test]
    fn frechet_mean_offset_closed_form() {
        // Equal unit covariances, means offset by (3, 0): distance ~ 9.
        let a = gaussian_points([0.0, 0.0], 1.0, 20_000, 5);
        let b = gaussian_points([3.0, 0.0], 1.0, 20_000, 6);
        let d = gaussian_frechet(&views(&a), &views(&b)).unwrap();
        assert!((d - 9.0).abs() < 0.3, "{d}");
    }

    #[test]
    fn frechet_symmetric() {
        let a = gaussian_points([0.0, 0.0], 1.0, 400, 8);
        let b = gaussian_points([1.0, 2.0], 2.0, 400, 9);
        let dab = gaussian_frechet(&views(&a), &views(&b)).unwrap();
        let dba = gaussian_frechet(&views(&b), &views(&a)).unwrap();
        assert!((dab - dba).abs() < 1e-9);
    }

    #[test]
    fn frechet_regularizes_singular_covariance() {
        let degenerate: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, 0.0]).collect();
        let other = gaussian_points([0.0, 0.0], 1.0, 50, 2);
        let (d, flagged) =
            gaussian_frechet_flagged(&views(&degenerate), &views(&other)).unwrap();
        assert!(flagged);
        assert!(d.is_finite());
    }

    fn three_mode_class() -> ClassSpec {
        ClassSpec {
            id: 0,
            count: 0,
            modes: vec![
                ModeSpec {
                    mean: vec![0.0, 0.0],
                    var: vec![0.01, 0.01],
                    weight: 0.5,
                },
                ModeSpec {
                    mean: vec![2.0, 0.0],
                    var: vec![0.01, 0.01],
                    weight: 0.3,
                },
                ModeSpec {
                    mean: vec![0.0, 2.0],
                    var: vec![0.01, 0.01],
                    weight: 0.2,
                },
            ],
        }
    }

    #[test]
    fn mode_recall_ground_truth_sampler() {
        let spec = three_mode_class();
        let mut points = Vec::new();
        for (i, mode) in spec.modes.iter().enumerate() {
            let n = (1000.0 * mode.weight) as usize;
            points.extend(gaussian_points(
                [mode.mean[0], mode.mean[1]],
                0.1,
                n,
                10 + i as u64,
            ));
        }
        let r = mode_recall(&views(&points), &spec, 2.0, 0.02).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn mode_recall_collapsed_generator() {
        let spec = three_mode_class();
        let points = gaussian_points([0.0, 0.0], 0.1, 1000, 44);
        let r = mode_recall(&views(&points), &spec, 2.0, 0.02).unwrap();
        assert!((r - 1.0 / 3.0).abs() < 1e-12, "{r}");
    }

    #[test]
    fn mode_recall_zero_radius() {
        let spec = three_mode_class();
        let points = gaussian_points([0.0, 0.0], 0.1, 200, 45);
        let r = mode_recall(&views(&points), &spec, 0.0, 0.02).unwrap();
        assert_eq!(r, 0.0);
    }

    fn labeled(points: Vec<Vec<f64>>, class: usize, subclass: usize) -> Vec<LabeledSample> {
        points
            .into_iter()
            .map(|x1| LabeledSample {
                x1,
                class,
                true_mode: None,
                subclass: Some(subclass),
                synthetic: false,
            })
            .collect()
    }

    #[test]
    fn downstream_separable_perfect() {
        let mut train = labeled(gaussian_points([0.0, 0.0], 0.2, 100, 1), 0, 0);
        train.extend(labeled(gaussian_points([10.0, 10.0], 0.2, 100, 2), 1, 0));
        let mut test = labeled(gaussian_points([0.0, 0.0], 0.2, 50, 3), 0, 0);
        test.extend(labeled(gaussian_points([10.0, 10.0], 0.2, 50, 4), 1, 0));
        let (bacc, f1) = train_downstream(&train, &test, 7).unwrap();
        assert_eq!(bacc, 1.0);
        assert_eq!(f1, 1.0);
    }

    #[test]
    fn always_one_class_metrics() {
        // Predictor collapsing to class 0 on balanced 2-class data:
        // bAcc = 1/2, macro-F1 = (2/3 + 0)/2 = 1/3.
        let truth: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let preds = vec![0usize; 100];
        let (bacc, f1) = classification_metrics(&truth, &preds, &[0, 1]);
        assert!((bacc - 0.5).abs() < 1e-12);
        assert!((f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn missing_train_class_rejected() {
        let train = labeled(gaussian_points([0.0, 0.0], 0.2, 30, 1), 0, 0);
        let mut test = labeled(gaussian_points([0.0, 0.0], 0.2, 10, 2), 0, 0);
        test.extend(labeled(gaussian_points([5.0, 5.0], 0.2, 10, 3), 1, 0));
        assert!(train_downstream(&train, &test, 0).is_err());
    }

    #[test]
    fn purity_singleton_subclasses_is_one() {
        let mut samples = labeled(gaussian_points([0.0, 0.0], 1.0, 60, 1), 0, 0);
        samples.extend(labeled(gaussian_points([5.0, 5.0], 1.0, 60, 2), 1, 0));
        let labels = subclass_labels(&samples).unwrap();
        let proj = random_projection(2, 3);
        let p = knn_purity(&samples, &labels, &proj, 10).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn purity_random_two_equal_subclasses_near_half() {
        // Exchangeable labels: expected purity k'/(n-1)-hypergeometric,
        // ~ 0.5 for two equal subclasses and n large.
        let samples = labeled(gaussian_points([0.0, 0.0], 1.0, 400, 9), 0, 0);
        let labels: BTreeMap<usize, Vec<usize>> =
            [(0, (0..400).map(|i| i % 2).collect())].into_iter().collect();
        let shuffled = matched_random_partition(&labels, 17);
        let proj = random_projection(2, 3);
        let p = knn_purity(&samples, &shuffled, &proj, 10).unwrap();
        assert!((p - 0.5).abs() < 0.05, "{p}");
    }

    #[test]
    fn purity_learned_beats_random_on_separated_subclasses() {
        let mut samples = labeled(gaussian_points([0.0, 0.0], 0.3, 150, 5), 0, 0);
        samples.extend(labeled(gaussian_points([4.0, 0.0], 0.3, 150, 6), 0, 1));
        let labels = subclass_labels(&samples).unwrap();
        let random = matched_random_partition(&labels, 23);
        let proj = random_projection(2, 3);
        let learned = knn_purity(&samples, &labels, &proj, 10).unwrap();
        let shuffled = knn_purity(&samples, &random, &proj, 10).unwrap();
        assert!(learned > shuffled + 0.05, "{learned} vs {shuffled}");
    }

    #[test]
    fn matched_random_preserves_multiset_and_is_deterministic() {
        let labels: BTreeMap<usize, Vec<usize>> =
            [(0, vec![0, 0, 0, 1, 1, 2]), (1, vec![0, 1])].into_iter().collect();
        let a = matched_random_partition(&labels, 3);
        let b = matched_random_partition(&labels, 3);
        assert_eq!(a, b);
        for (c, orig) in &labels {
            let mut x = orig.clone();
            let mut y = a[c].clone();
            x.sort_unstable();
            y.sort_unstable();
            assert_eq!(x, y);
        }
        let c = matched_random_partition(&labels, 4);
        assert!(a != c || labels.values().all(|v| v.len() <= 1));
    }

    #[test]
    fn random_partition_matches_exchangeability_baseline() {
        // 2 equal subclasses of 50: hypergeometric expectation for the
        // share of same-label neighbors among k drawn from n-1 = 99 is
        // (50-1)/99 ~ 0.4949. Average over 100 shuffles.
        let samples = labeled(gaussian_points([0.0, 0.0], 1.0, 100, 31), 0, 0);
        let labels: BTreeMap<usize, Vec<usize>> =
            [(0, (0..100).map(|i| i % 2).collect())].into_iter().collect();
        let proj = random_projection(2, 3);
        let mut total = 0.0;
        for s in 0..100 {
            let shuffled = matched_random_partition(&labels, 1000 + s);
            total += knn_purity(&samples, &shuffled, &proj, 10).unwrap();
        }
        let mean = total / 100.0;
        let expect = 49.0 / 99.0;
        assert!((mean - expect).abs() < 0.02, "{mean} vs {expect}");
    }

    #[test]
    fn balanced_split_is_balanced_and_disjoint() {
        let mut samples = labeled(gaussian_points([0.0, 0.0], 1.0, 80, 1), 0, 0);
        samples.extend(labeled(gaussian_points([5.0, 0.0], 1.0, 40, 2), 1, 0));
        let (train, test) = balanced_split(&samples, 20, 9).unwrap();
        assert_eq!(test.iter().filter(|s| s.class == 0).count(), 20);
        assert_eq!(test.iter().filter(|s| s.class == 1).count(), 20);
        assert_eq!(train.len() + test.len(), 120);
    }
}
