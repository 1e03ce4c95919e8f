//! Seeded synthetic long-tailed, multi-modal benchmark generation, the
//! frequency-tier partition, and per-class augmentation targets.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SubflowError};
use crate::rng::{derive_seed_indexed, rng_from_seed};

/// One Gaussian mode of a class-conditional mixture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeSpec {
    pub mean: Vec<f64>,
    /// Diagonal variance, strictly positive per coordinate.
    pub var: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: usize,
    pub modes: Vec<ModeSpec>,
    pub count: usize,
}

/// Full benchmark description; read from a JSON config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    pub classes: Vec<ClassSpec>,
    pub seed: u64,
}

fn default_dimension() -> usize {
    2
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dimension < 1 {
            return Err(SubflowError::Config("dimension must be >= 1".into()));
        }
        if self.classes.len() < 2 {
            return Err(SubflowError::Config("need at least 2 classes".into()));
        }
        for class in &self.classes {
            if class.modes.is_empty() {
                return Err(SubflowError::Config(format!(
                    "class {} has no modes",
                    class.id
                )));
            }
            if class.count < 1 {
                return Err(SubflowError::Config(format!(
                    "class {} has non-positive count",
                    class.id
                )));
            }
            let wsum: f64 = class.modes.iter().map(|m| m.weight).sum();
            if (wsum - 1.0).abs() > 1e-9 {
                return Err(SubflowError::Config(format!(
                    "class {} mode weights sum to {wsum}, expected 1",
                    class.id
                )));
            }
            for mode in &class.modes {
                if mode.mean.len() != self.dimension || mode.var.len() != self.dimension {
                    return Err(SubflowError::Config(format!(
                        "class {} mode dimension mismatch",
                        class.id
                    )));
                }
                if mode.var.iter().any(|&v| v <= 0.0) {
                    return Err(SubflowError::Config(format!(
                        "class {} has non-positive mode variance",
                        class.id
                    )));
                }
                if mode.weight < 0.0 {
                    return Err(SubflowError::Config(format!(
                        "class {} has negative mode weight",
                        class.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A latent point with its coarse class, ground-truth mode, and (after
/// subclass induction) hard subclass label. `true_mode` is hidden from all
/// fitting code and only consulted by mode-recall evaluation; it is `None`
/// for synthetic rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub x1: Vec<f64>,
    pub class: usize,
    pub true_mode: Option<usize>,
    pub subclass: Option<usize>,
    pub synthetic: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    Ult,
    Lt,
    Mt,
    Head,
    Dominant,
}

/// Frequency-tier partition of classes around the median count `m` of the
/// non-dominant classes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TierPartition {
    pub tiers: BTreeMap<usize, Tier>,
    pub dominant: usize,
    pub median: f64,
}

/// Draw `n_c` samples per class from its mode mixture. Deterministic given
/// the spec seed; class streams are derived from (seed, class id) so class
/// order in the spec does not matter.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    let mut out = Vec::new();
    for class in &spec.classes {
        let mut rng = rng_from_seed(derive_seed_indexed(spec.seed, "class", class.id as u64));
        for _ in 0..class.count {
            let mode_idx = draw_mode(&mut rng, &class.modes);
            let mode = &class.modes[mode_idx];
            let mut x1 = Vec::with_capacity(spec.dimension);
            for d in 0..spec.dimension {
                let z: f64 = StandardNormal.sample(&mut rng);
                x1.push(mode.mean[d] + mode.var[d].sqrt() * z);
            }
            out.push(LabeledSample {
                x1,
                class: class.id,
                true_mode: Some(mode_idx),
                subclass: None,
                synthetic: false,
            });
        }
    }
    Ok(out)
}

fn draw_mode<R: Rng>(rng: &mut R, modes: &[ModeSpec]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, mode) in modes.iter().enumerate() {
        acc += mode.weight;
        if u < acc {
            return i;
        }
    }
    modes.len() - 1
}

/// Median of an integer list; even lengths take the midpoint of the two
/// central elements.
fn median(counts: &mut Vec<usize>) -> f64 {
    counts.sort_unstable();
    let n = counts.len();
    if n % 2 == 1 {
        counts[n / 2] as f64
    } else {
        (counts[n / 2 - 1] + counts[n / 2]) as f64 / 2.0
    }
}

/// Partition classes into frequency tiers. The dominant class is the
/// max-count class (ties broken by smallest id); it is excluded both from
/// the median `m` and from tiering. Tier rule over `n`:
/// ULT `n < m/4`, LT `m/4 <= n < m/2`, MT `m/2 <= n < 5m/2`, Head `n >= 5m/2`.
pub fn partition_classes(counts: &BTreeMap<usize, usize>) -> Result<TierPartition> {
    if counts.len() < 2 {
        return Err(SubflowError::InvalidInput(
            "partition requires at least 2 classes".into(),
        ));
    }
    if counts.values().any(|&n| n < 1) {
        return Err(SubflowError::InvalidInput("all counts must be >= 1".into()));
    }
    // BTreeMap iteration is id-ascending, so strict `>` keeps the smallest id on ties.
    let mut dominant = *counts.keys().next().unwrap();
    for (&c, &n) in counts {
        if n > counts[&dominant] {
            dominant = c;
        }
    }
    let mut rest: Vec<usize> = counts
        .iter()
        .filter(|(&c, _)| c != dominant)
        .map(|(_, &n)| n)
        .collect();
    let m = median(&mut rest);
    let mut tiers = BTreeMap::new();
    for (&c, &n) in counts {
        let tier = if c == dominant {
            Tier::Dominant
        } else {
            let n = n as f64;
            if n < m / 4.0 {
                Tier::Ult
            } else if n < m / 2.0 {
                Tier::Lt
            } else if n < 2.5 * m {
                Tier::Mt
            } else {
                Tier::Head
            }
        };
        tiers.insert(c, tier);
    }
    Ok(TierPartition {
        tiers,
        dominant,
        median: m,
    })
}

/// Per-class post-augmentation target counts. Only ULT/LT/MT classes are
/// augmented; caps are applied after the ceiling of the median multiple.
pub fn augmentation_targets(
    partition: &TierPartition,
    counts: &BTreeMap<usize, usize>,
) -> BTreeMap<usize, usize> {
    let m = partition.median;
    let mut targets = BTreeMap::new();
    for (&c, &n) in counts {
        let target = match partition.tiers[&c] {
            Tier::Ult => ((0.5 * m).ceil() as usize).min(10 * n),
            Tier::Lt => ((1.0 * m).ceil() as usize).min(10 * n),
            Tier::Mt => ((2.5 * m).ceil() as usize).min(5 * n),
            Tier::Head | Tier::Dominant => n,
        };
        targets.insert(c, target.max(n));
    }
    targets
}

/// Synthetic rows to generate per class: `max(0, target - n)`.
pub fn synthetic_counts(
    targets: &BTreeMap<usize, usize>,
    counts: &BTreeMap<usize, usize>,
) -> BTreeMap<usize, usize> {
    targets
        .iter()
        .map(|(&c, &t)| (c, t.saturating_sub(counts[&c])))
        .collect()
}

/// Class counts of the real (non-synthetic) rows of a dataset.
pub fn class_counts(samples: &[LabeledSample]) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for s in samples.iter().filter(|s| !s.synthetic) {
        *counts.entry(s.class).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_mode_spec(n: usize, seed: u64) -> DatasetSpec {
        DatasetSpec {
            dimension: 2,
            seed,
            classes: vec![
                ClassSpec {
                    id: 0,
                    count: n,
                    modes: vec![ModeSpec {
                        mean: vec![0.0, 0.0],
                        var: vec![1.0, 1.0],
                        weight: 1.0,
                    }],
                },
                ClassSpec {
                    id: 1,
                    count: 10,
                    modes: vec![ModeSpec {
                        mean: vec![5.0, 5.0],
                        var: vec![1.0, 1.0],
                        weight: 1.0,
                    }],
                },
            ],
        }
    }

    #[test]
    fn single_gaussian_sample_mean_near_zero() {
        let spec = single_mode_spec(1000, 42);
        let data = generate_dataset(&spec).unwrap();
        let class0: Vec<_> = data.iter().filter(|s| s.class == 0).collect();
        assert_eq!(class0.len(), 1000);
        for d in 0..2 {
            let mean: f64 = class0.iter().map(|s| s.x1[d]).sum::<f64>() / 1000.0;
            assert!(mean.abs() < 0.1, "coordinate {d} mean {mean}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = single_mode_spec(200, 7);
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mode_counts_within_multinomial_bound() {
        // 3-mode class, weights (0.7, 0.2, 0.1), n = 10000. Oracle: per-mode
        // count is Binomial(n, w); 3-sigma band around n*w.
        let n = 10000usize;
        let weights = [0.7, 0.2, 0.1];
        let spec = DatasetSpec {
            dimension: 1,
            seed: 3,
            classes: vec![
                ClassSpec {
                    id: 0,
                    count: n,
                    modes: weights
                        .iter()
                        .enumerate()
                        .map(|(i, &w)| ModeSpec {
                            mean: vec![i as f64 * 10.0],
                            var: vec![1.0],
                            weight: w,
                        })
                        .collect(),
                },
                ClassSpec {
                    id: 1,
                    count: 1,
                    modes: vec![ModeSpec {
                        mean: vec![0.0],
                        var: vec![1.0],
                        weight: 1.0,
                    }],
                },
            ],
        };
        let data = generate_dataset(&spec).unwrap();
        for (i, &w) in weights.iter().enumerate() {
            let count = data
                .iter()
                .filter(|s| s.class == 0 && s.true_mode == Some(i))
                .count() as f64;
            let expect = n as f64 * w;
            let sigma = (n as f64 * w * (1.0 - w)).sqrt();
            assert!(
                (count - expect).abs() <= 3.0 * sigma,
                "mode {i}: {count} vs {expect} +- {}",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = single_mode_spec(10, 1);
        spec.classes[0].modes[0].var[0] = 0.0;
        assert!(generate_dataset(&spec).is_err());
        let mut spec = single_mode_spec(10, 1);
        spec.classes[0].count = 0;
        assert!(generate_dataset(&spec).is_err());
        let mut spec = single_mode_spec(10, 1);
        spec.classes.truncate(1);
        assert!(generate_dataset(&spec).is_err());
    }

    fn counts_of(pairs: &[(usize, usize)]) -> BTreeMap<usize, usize> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn partition_worked_example() {
        // A:1000 B:100 C:60 D:20 E:10 -> dominant A, m = median(10,20,60,100) = 40.
        let counts = counts_of(&[(0, 1000), (1, 100), (2, 60), (3, 20), (4, 10)]);
        let p = partition_classes(&counts).unwrap();
        assert_eq!(p.dominant, 0);
        assert_eq!(p.median, 40.0);
        assert_eq!(p.tiers[&4], Tier::Lt); // m/4 = 10 <= 10 < 20
        assert_eq!(p.tiers[&3], Tier::Mt); // 20 <= 20 < 100
        assert_eq!(p.tiers[&2], Tier::Mt); // 60 < 100
        assert_eq!(p.tiers[&1], Tier::Head); // 100 >= 100
    }

    #[test]
    fn partition_two_classes() {
        let counts = counts_of(&[(0, 50), (1, 10)]);
        let p = partition_classes(&counts).unwrap();
        assert_eq!(p.dominant, 0);
        assert_eq!(p.median, 10.0);
        // 10 >= 5m/2 = 25 is false; m/2 = 5 <= 10 < 25 -> MT.
        assert_eq!(p.tiers[&1], Tier::Mt);
    }

    #[test]
    fn equal_nondominant_counts_all_mt() {
        let counts = counts_of(&[(0, 500), (1, 30), (2, 30), (3, 30)]);
        let p = partition_classes(&counts).unwrap();
        for c in 1..=3 {
            assert_eq!(p.tiers[&c], Tier::Mt);
        }
    }

    #[test]
    fn dominant_tie_broken_by_smallest_id() {
        let counts = counts_of(&[(3, 100), (1, 100), (2, 10)]);
        let p = partition_classes(&counts).unwrap();
        assert_eq!(p.dominant, 1);
    }

    #[test]
    fn partition_requires_two_classes() {
        let counts = counts_of(&[(0, 5)]);
        assert!(partition_classes(&counts).is_err());
    }

    #[test]
    fn target_formulas() {
        // Construct a partition with m = 40 directly.
        let counts = counts_of(&[(0, 1000), (1, 3), (2, 60), (3, 500)]);
        let partition = TierPartition {
            dominant: 0,
            median: 40.0,
            tiers: counts_of(&[(0, 0), (1, 0), (2, 0), (3, 0)])
                .keys()
                .map(|&c| {
                    (
                        c,
                        match c {
                            0 => Tier::Dominant,
                            1 => Tier::Ult,
                            2 => Tier::Mt,
                            _ => Tier::Head,
                        },
                    )
                })
                .collect(),
        };
        let targets = augmentation_targets(&partition, &counts);
        // ULT n=3: min(ceil(20), 30) = 20 -> 17 synthetic.
        assert_eq!(targets[&1], 20);
        // MT n=60: min(ceil(100), 300) = 100 -> 40 synthetic.
        assert_eq!(targets[&2], 100);
        // Head and dominant unchanged.
        assert_eq!(targets[&3], 500);
        assert_eq!(targets[&0], 1000);
        let synth = synthetic_counts(&targets, &counts);
        assert_eq!(synth[&1], 17);
        assert_eq!(synth[&2], 40);
        assert_eq!(synth[&3], 0);
    }

    #[test]
    fn targets_never_below_real_count() {
        // MT class with n above the tier target keeps its own count.
        let counts = counts_of(&[(0, 1000), (1, 95), (2, 40)]);
        let p = partition_classes(&counts).unwrap();
        let targets = augmentation_targets(&p, &counts);
        for (&c, &t) in &targets {
            assert!(t >= counts[&c]);
        }
        let synth = synthetic_counts(&targets, &counts);
        assert!(synth.values().all(|&s| s < usize::MAX / 2));
    }
}
