//! End-to-end orchestration: pipeline configuration, stage seeding,
//! CSV/JSON/SVG artifact I/O, and the in-memory runner shared by the CLI
//! and the integration tests.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SubflowError};
use crate::eval::{
    self, balanced_split, gaussian_frechet_flagged, knn_purity,
    matched_random_partition, mode_recall, random_projection, subclass_labels,
};
use crate::fm::{self, CondIndex, Conditioning, FmConfig, SourceMode, VelocityField};
use crate::gmm::{self, EbicTable, GmmConfig, GmmModel, SubclassAssignment};
use crate::rng::derive_seed;
use crate::sampler::{self, Integrator, SampleRequest};
use crate::sourceopt::{self, GeometryDiagnostics, OptConfig, OptResult, SourceParams};
use crate::synthbench::{
    self, ClassSpec, DatasetSpec, LabeledSample, ModeSpec, Tier, TierPartition,
};

/// Evaluation-stage settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSettings {
    /// Mode-recall radius in mode standard deviations.
    pub rho: f64,
    /// Minimum generated-sample share for a mode to count as recalled.
    pub min_share: f64,
    /// Neighbors for subclass purity.
    pub knn_k: usize,
    /// Held-out real samples per class for the downstream classifier.
    pub test_per_class: usize,
    /// Classifier seeds averaged per generative run.
    pub classifier_runs: usize,
    /// Generated samples per tail class for Fréchet / mode recall.
    pub gen_per_class: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            rho: 2.0,
            min_share: 0.1,
            knn_k: 10,
            test_per_class: 10,
            classifier_runs: 3,
            gen_per_class: 300,
        }
    }
}

/// Full pipeline configuration; one JSON file drives every subcommand.
/// The master `seed` derives all stage seeds (including the dataset draw,
/// overriding `dataset.seed`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub gmm: GmmConfig,
    #[serde(default)]
    pub source_opt: OptConfig,
    #[serde(default = "default_fm_config")]
    pub fm: FmConfig,
    #[serde(default = "default_sample_steps")]
    pub sample_steps: usize,
    #[serde(default)]
    pub eval: EvalSettings,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

/// Desk-scale training budget so `run-all` and the ablation grid stay
/// within a single-core time budget; larger nets only buy accuracy this
/// benchmark does not need.
fn default_fm_config() -> FmConfig {
    FmConfig {
        steps: 4000,
        batch_size: 256,
        learning_rate: 1e-3,
        hidden: vec![64, 64],
        embed_dim: 16,
        ..FmConfig::default()
    }
}

fn default_sample_steps() -> usize {
    64
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.gmm.k_max < 1 {
            return Err(SubflowError::Config("gmm.k_max must be >= 1".into()));
        }
        if self.source_opt.batch_size < 1 || self.fm.batch_size < 1 {
            return Err(SubflowError::Config("batch sizes must be >= 1".into()));
        }
        if self.sample_steps < 1 {
            return Err(SubflowError::Config("sample_steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.min_share) {
            return Err(SubflowError::Config("eval.min_share must be in [0,1]".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let config: Self = serde_json::from_str(&text).map_err(|e| {
            SubflowError::Config(format!("{}: {e}", path.display()))
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Stage seed = hash(master seed, stage name); stages re-run
    /// independently without reseeding ambiguity.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn config_hash(&self) -> String {
        // The output location must not affect artifact contents.
        let mut scrubbed = self.clone();
        scrubbed.out_dir = default_out_dir();
        let json = serde_json::to_string(&scrubbed).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// The imbalanced multi-modal 2D benchmark used by default: one dominant
/// class, split head classes with well-separated modes, and medium/low/
/// ultra-low tail classes placed far from the origin so a standard source
/// pays a transport cost the learned sources avoid.
pub fn default_benchmark_spec() -> DatasetSpec {
    // Split classes separate along one tight axis (std 0.3, gap 1.8) and
    // share a broad axis (std ~1.5); unsplit classes are broad blobs. The
    // spatial scale matters: the outward pull on a source mean falls off
    // with distance while the cap penalty is scale-relative, so this
    // scale keeps mean displacement norms within 1.5x the caps. The
    // dominant unimodal class holds most of the sample weight, which
    // keeps the weighted before-alignment near zero.
    let split_y = vec![0.09, 2.3409];
    let split_x = vec![2.3409, 0.09];
    let blob = vec![2.9241, 2.9241];
    let classes = vec![
        ClassSpec {
            id: 0,
            count: 3600,
            modes: vec![ModeSpec {
                mean: vec![0.0, 0.0],
                var: vec![2.0736, 2.0736],
                weight: 1.0,
            }],
        },
        ClassSpec {
            id: 1,
            count: 360,
            modes: vec![
                ModeSpec {
                    mean: vec![7.2, 0.0],
                    var: split_y.clone(),
                    weight: 0.55,
                },
                ModeSpec {
                    mean: vec![9.0, 0.0],
                    var: split_y.clone(),
                    weight: 0.45,
                },
            ],
        },
        ClassSpec {
            id: 2,
            count: 300,
            modes: vec![
                ModeSpec {
                    mean: vec![0.0, 7.2],
                    var: split_x.clone(),
                    weight: 0.5,
                },
                ModeSpec {
                    mean: vec![0.0, 9.0],
                    var: split_x.clone(),
                    weight: 0.5,
                },
            ],
        },
        ClassSpec {
            id: 3,
            count: 200,
            modes: vec![
                ModeSpec {
                    mean: vec![-8.55, 5.4],
                    var: vec![0.09, 2.6244],
                    weight: 0.65,
                },
                ModeSpec {
                    mean: vec![-4.95, 5.4],
                    var: vec![0.2025, 0.2025],
                    weight: 0.35,
                },
            ],
        },
        ClassSpec {
            id: 4,
            count: 400,
            modes: vec![ModeSpec {
                mean: vec![-3.6, 7.92],
                var: vec![3.24, 3.24],
                weight: 1.0,
            }],
        },
        ClassSpec {
            id: 5,
            count: 100,
            modes: vec![ModeSpec {
                mean: vec![-5.4, -3.96],
                var: vec![3.24, 3.24],
                weight: 1.0,
            }],
        },
        ClassSpec {
            id: 6,
            count: 60,
            modes: vec![ModeSpec {
                mean: vec![7.2, 6.6],
                var: blob.clone(),
                weight: 1.0,
            }],
        },
        ClassSpec {
            id: 7,
            count: 30,
            modes: vec![ModeSpec {
                mean: vec![5.8, -5.3],
                var: blob,
                weight: 1.0,
            }],
        },
    ];
    DatasetSpec {
        dimension: 2,
        classes,
        seed: 0,
    }
}

pub fn default_config() -> PipelineConfig {
    PipelineConfig {
        dataset: default_benchmark_spec(),
        gmm: GmmConfig::default(),
        source_opt: OptConfig::default(),
        fm: default_fm_config(),
        sample_steps: default_sample_steps(),
        eval: EvalSettings::default(),
        out_dir: default_out_dir(),
        seed: 3,
    }
}

/// One cell of the {±subclass, ±source optimization} grid. `subclass:
/// false` forces K=1 per class, making subclass conditioning coincide
/// with the coarse label; `optimize: false` keeps the standard N(0, I)
/// source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub subclass: bool,
    pub optimize: bool,
}

impl Variant {
    pub const FULL: Variant = Variant {
        subclass: true,
        optimize: true,
    };
    pub const BASELINE: Variant = Variant {
        subclass: false,
        optimize: false,
    };

    pub const GRID: [Variant; 4] = [
        Variant {
            subclass: false,
            optimize: false,
        },
        Variant {
            subclass: false,
            optimize: true,
        },
        Variant {
            subclass: true,
            optimize: false,
        },
        Variant::FULL,
    ];

    pub fn label(&self) -> String {
        format!(
            "{}_{}",
            if self.subclass { "subclass" } else { "coarse" },
            if self.optimize { "learned" } else { "standard" }
        )
    }
}

/// Everything the offline pipeline produces for one variant and seed.
pub struct PipelineArtifacts {
    pub real: Vec<LabeledSample>,
    pub partition: TierPartition,
    pub targets: BTreeMap<usize, usize>,
    pub models: BTreeMap<usize, GmmModel>,
    pub assignment: SubclassAssignment,
    pub ebic_tables: Vec<EbicTable>,
    pub sources: Option<SourceParams>,
    pub opt: Option<OptResult>,
    pub field: VelocityField,
    pub fm_config: FmConfig,
    pub fm_trace: Vec<f64>,
    pub augmented: Vec<LabeledSample>,
}

impl PipelineArtifacts {
    pub fn source_mode(&self) -> SourceMode {
        if self.sources.is_some() {
            SourceMode::Learned
        } else {
            SourceMode::Standard
        }
    }
}

fn effective_gmm(config: &PipelineConfig, variant: Variant) -> GmmConfig {
    let mut gmm = config.gmm.clone();
    if !variant.subclass {
        gmm.k_max = 1;
    }
    gmm
}

/// Run generate → fit-subclasses → optimize-sources → train → sample in
/// memory. Stage seeds derive from the master seed only, so artifacts are
/// reproducible per stage.
pub fn run_pipeline(config: &PipelineConfig, variant: Variant) -> Result<PipelineArtifacts> {
    config.validate()?;
    let mut spec = config.dataset.clone();
    spec.seed = config.stage_seed("generate");
    let mut real = synthbench::generate_dataset(&spec)?;
    let counts = synthbench::class_counts(&real);
    let partition = synthbench::partition_classes(&counts)?;
    let targets = synthbench::augmentation_targets(&partition, &counts);

    let gmm_config = effective_gmm(config, variant);
    let (models, assignment, ebic_tables) =
        gmm::fit_subclasses(&mut real, &gmm_config, config.stage_seed("fit-subclasses"))?;

    let (sources, opt) = if variant.optimize {
        let centers: BTreeMap<usize, Vec<f64>> = models
            .iter()
            .map(|(&c, m)| (c, m.class_center.clone()))
            .collect();
        let caps = sourceopt::compute_caps(&real, &centers)?;
        let init = sourceopt::init_sources(&models, &caps)?;
        let mut opt_config = config.source_opt.clone();
        opt_config.seed = config.stage_seed("optimize-sources");
        let result = sourceopt::optimize_sources(&real, &init, &opt_config)?;
        (Some(result.params.clone()), Some(result))
    } else {
        (None, None)
    };

    let mut fm_config = config.fm.clone();
    fm_config.seed = config.stage_seed("train");
    fm_config.conditioning = Conditioning::Subclass;
    fm_config.source = if sources.is_some() {
        SourceMode::Learned
    } else {
        SourceMode::Standard
    };
    let class_subclasses: BTreeMap<usize, usize> =
        models.iter().map(|(&c, m)| (c, m.k)).collect();
    let cond_index = CondIndex::new(&class_subclasses);
    let (field, fm_trace) = fm::train_fm(&real, sources.as_ref(), cond_index, &fm_config)?;

    let syn_counts = synthbench::synthetic_counts(&targets, &counts);
    let template = SampleRequest {
        class: 0,
        count: 1,
        steps: config.sample_steps,
        seed: config.stage_seed("sample"),
        conditioning: Conditioning::Subclass,
        source: fm_config.source,
        integrator: Integrator::Euler,
    };
    let augmented = sampler::synthesize_augmentation(
        &field,
        sources.as_ref(),
        &assignment.weights,
        &syn_counts,
        &real,
        &template,
    )?;

    Ok(PipelineArtifacts {
        real,
        partition,
        targets,
        models,
        assignment,
        ebic_tables,
        sources,
        opt,
        field,
        fm_config,
        fm_trace,
        augmented,
    })
}

/// Per-class and aggregate evaluation of one pipeline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub frechet_per_class: BTreeMap<usize, f64>,
    pub mode_recall_per_class: BTreeMap<usize, f64>,
    pub frechet_tail_mean: f64,
    pub mode_recall_tail_mean: f64,
    pub frechet_regularized: bool,
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    pub balanced_accuracy_real_only: f64,
    pub macro_f1_real_only: f64,
    pub knn_purity_learned: f64,
    pub knn_purity_random: f64,
    pub geometry: Option<eval::GeometryDiagnosticsSnapshot>,
}

fn tail_classes(partition: &TierPartition) -> Vec<usize> {
    partition
        .tiers
        .iter()
        .filter(|(_, t)| matches!(t, Tier::Ult | Tier::Lt | Tier::Mt))
        .map(|(&c, _)| c)
        .collect()
}

/// Generate fresh evaluation samples for each tail class and score them
/// against the real class samples and the ground-truth modes.
pub fn tail_generation_metrics(
    config: &PipelineConfig,
    artifacts: &PipelineArtifacts,
) -> Result<(BTreeMap<usize, f64>, BTreeMap<usize, f64>, bool)> {
    let eval_seed = config.stage_seed("evaluate");
    let mut frechet = BTreeMap::new();
    let mut recall = BTreeMap::new();
    let mut regularized = false;
    for class in tail_classes(&artifacts.partition) {
        let request = SampleRequest {
            class,
            count: config.eval.gen_per_class,
            steps: config.sample_steps,
            seed: crate::rng::derive_seed_indexed(eval_seed, "eval-class", class as u64),
            conditioning: Conditioning::Subclass,
            source: artifacts.source_mode(),
            integrator: Integrator::Euler,
        };
        let weights = &artifacts.assignment.weights[&class];
        let generated =
            sampler::sample_class(&artifacts.field, artifacts.sources.as_ref(), weights, &request)?;
        let gen_views: Vec<&[f64]> = generated.iter().map(|(x, _)| x.as_slice()).collect();
        let real_views: Vec<&[f64]> = artifacts
            .real
            .iter()
            .filter(|s| s.class == class)
            .map(|s| s.x1.as_slice())
            .collect();
        let (d, flagged) = gaussian_frechet_flagged(&real_views, &gen_views)?;
        regularized |= flagged;
        frechet.insert(class, d);
        let spec = config
            .dataset
            .classes
            .iter()
            .find(|c| c.id == class)
            .ok_or_else(|| SubflowError::InvalidInput(format!("no spec for class {class}")))?;
        recall.insert(
            class,
            mode_recall(&gen_views, spec, config.eval.rho, config.eval.min_share)?,
        );
    }
    Ok((frechet, recall, regularized))
}

/// Downstream classification with and without the synthetic rows, averaged
/// over `classifier_runs` seeds. Both arms share the same real train/test
/// split; the augmented arm adds all synthetic rows to the train side.
pub fn downstream_metrics(
    config: &PipelineConfig,
    artifacts: &PipelineArtifacts,
) -> Result<(f64, f64, f64, f64)> {
    let eval_seed = config.stage_seed("evaluate");
    let (train_real, test) =
        balanced_split(&artifacts.real, config.eval.test_per_class, eval_seed)?;
    let mut train_aug = train_real.clone();
    train_aug.extend(
        artifacts
            .augmented
            .iter()
            .filter(|s| s.synthetic)
            .cloned(),
    );
    let mut sums = [0.0; 4];
    for run in 0..config.eval.classifier_runs {
        let seed = crate::rng::derive_seed_indexed(eval_seed, "classifier", run as u64);
        let (bacc_a, f1_a) = eval::train_downstream(&train_aug, &test, seed)?;
        let (bacc_r, f1_r) = eval::train_downstream(&train_real, &test, seed)?;
        sums[0] += bacc_a;
        sums[1] += f1_a;
        sums[2] += bacc_r;
        sums[3] += f1_r;
    }
    let n = config.eval.classifier_runs as f64;
    Ok((sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n))
}

/// Learned-subclass kNN purity against the matched random partition, in a
/// fixed seeded random linear projection.
pub fn purity_metrics(
    config: &PipelineConfig,
    artifacts: &PipelineArtifacts,
) -> Result<(f64, f64)> {
    let eval_seed = config.stage_seed("evaluate");
    let labels = subclass_labels(&artifacts.real)?;
    let shuffled = matched_random_partition(&labels, eval_seed);
    let proj = random_projection(config.dataset.dimension, eval_seed);
    let learned = knn_purity(&artifacts.real, &labels, &proj, config.eval.knn_k)?;
    let random = knn_purity(&artifacts.real, &shuffled, &proj, config.eval.knn_k)?;
    Ok((learned, random))
}

pub fn evaluate_pipeline(
    config: &PipelineConfig,
    artifacts: &PipelineArtifacts,
) -> Result<PipelineReport> {
    let (frechet_per_class, mode_recall_per_class, frechet_regularized) =
        tail_generation_metrics(config, artifacts)?;
    let mean = |m: &BTreeMap<usize, f64>| m.values().sum::<f64>() / m.len().max(1) as f64;
    let (bacc_aug, f1_aug, bacc_real, f1_real) = downstream_metrics(config, artifacts)?;
    let (purity_learned, purity_random) = purity_metrics(config, artifacts)?;
    Ok(PipelineReport {
        frechet_tail_mean: mean(&frechet_per_class),
        mode_recall_tail_mean: mean(&mode_recall_per_class),
        frechet_per_class,
        mode_recall_per_class,
        frechet_regularized,
        balanced_accuracy: bacc_aug,
        macro_f1: f1_aug,
        balanced_accuracy_real_only: bacc_real,
        macro_f1_real_only: f1_real,
        knn_purity_learned: purity_learned,
        knn_purity_random: purity_random,
        geometry: artifacts
            .opt
            .as_ref()
            .map(|o| eval::GeometryDiagnosticsSnapshot::from_pair(&o.before, &o.after)),
    })
}

/// Mean metrics of one ablation cell over the generative seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub mean_balanced_accuracy: f64,
    pub mean_macro_f1: f64,
    pub mean_frechet_tail: f64,
    pub mean_mode_recall_tail: f64,
}

/// Run the four-cell grid over `n_seeds` master seeds derived from the
/// config seed; downstream numbers average classifier seeds per run.
pub fn run_ablation(config: &PipelineConfig, n_seeds: usize) -> Result<Vec<AblationCell>> {
    let mut cells = Vec::new();
    for variant in Variant::GRID {
        let mut sums = [0.0; 4];
        for i in 0..n_seeds {
            let mut run_config = config.clone();
            run_config.seed = crate::rng::derive_seed_indexed(config.seed, "ablation-seed", i as u64);
            let artifacts = run_pipeline(&run_config, variant)?;
            let report = evaluate_pipeline(&run_config, &artifacts)?;
            sums[0] += report.balanced_accuracy;
            sums[1] += report.macro_f1;
            sums[2] += report.frechet_tail_mean;
            sums[3] += report.mode_recall_tail_mean;
        }
        let n = n_seeds as f64;
        cells.push(AblationCell {
            variant,
            mean_balanced_accuracy: sums[0] / n,
            mean_macro_f1: sums[1] / n,
            mean_frechet_tail: sums[2] / n,
            mean_mode_recall_tail: sums[3] / n,
        });
    }
    Ok(cells)
}

// ---------------------------------------------------------------------------
// Artifact I/O
// ---------------------------------------------------------------------------

/// Write samples as CSV: `class,true_mode,x_0..x_{D-1}` plus a `subclass`
/// column once assignments exist and a `synthetic` flag column once
/// synthetic rows exist.
pub fn write_dataset_csv(path: &Path, samples: &[LabeledSample], dim: usize) -> Result<()> {
    let with_subclass = samples.iter().any(|s| s.subclass.is_some());
    let with_synthetic = samples.iter().any(|s| s.synthetic);
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["class".to_string(), "true_mode".to_string()];
    for i in 0..dim {
        header.push(format!("x_{i}"));
    }
    if with_subclass {
        header.push("subclass".to_string());
    }
    if with_synthetic {
        header.push("synthetic".to_string());
    }
    writer.write_record(&header)?;
    for s in samples {
        let mut record = vec![
            s.class.to_string(),
            s.true_mode.map(|m| m.to_string()).unwrap_or_default(),
        ];
        for x in &s.x1 {
            record.push(format!("{x:?}"));
        }
        if with_subclass {
            record.push(s.subclass.map(|k| k.to_string()).unwrap_or_default());
        }
        if with_synthetic {
            record.push(if s.synthetic { "1" } else { "0" }.to_string());
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_dataset_csv(path: &Path) -> Result<Vec<LabeledSample>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.to_string())
        .collect();
    let x_cols: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("x_"))
        .map(|(i, _)| i)
        .collect();
    if header.first().map(String::as_str) != Some("class") || x_cols.is_empty() {
        return Err(SubflowError::InvalidInput(format!(
            "{}: expected header class,true_mode,x_0,...",
            path.display()
        )));
    }
    let subclass_col = header.iter().position(|h| h == "subclass");
    let synthetic_col = header.iter().position(|h| h == "synthetic");
    let true_mode_col = header.iter().position(|h| h == "true_mode");
    let mut samples = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let parse_usize = |s: &str, what: &str| -> Result<usize> {
            s.parse().map_err(|_| {
                SubflowError::InvalidInput(format!(
                    "{} line {}: bad {what} `{s}`",
                    path.display(),
                    line + 2
                ))
            })
        };
        let class = parse_usize(&record[0], "class")?;
        let true_mode = match true_mode_col.map(|i| &record[i]) {
            Some("") | None => None,
            Some(s) => Some(parse_usize(s, "true_mode")?),
        };
        let mut x1 = Vec::with_capacity(x_cols.len());
        for &i in &x_cols {
            let v: f64 = record[i].parse().map_err(|_| {
                SubflowError::InvalidInput(format!(
                    "{} line {}: bad coordinate `{}`",
                    path.display(),
                    line + 2,
                    &record[i]
                ))
            })?;
            x1.push(v);
        }
        let subclass = match subclass_col.map(|i| &record[i]) {
            Some("") | None => None,
            Some(s) => Some(parse_usize(s, "subclass")?),
        };
        let synthetic = matches!(synthetic_col.map(|i| &record[i]), Some("1"));
        samples.push(LabeledSample {
            x1,
            class,
            true_mode,
            subclass,
            synthetic,
        });
    }
    Ok(samples)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn write_trace_csv(path: &Path, trace: &[f64]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["step", "loss"])?;
    for (i, loss) in trace.iter().enumerate() {
        writer.write_record([i.to_string(), format!("{loss:?}")])?;
    }
    writer.flush()?;
    Ok(())
}

/// Table 1-style per-benchmark split summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSummary {
    pub num_classes: usize,
    pub total_subclasses: usize,
    pub num_unsplit: usize,
    pub min_subclass_count: usize,
}

pub fn split_summary(assignment: &SubclassAssignment) -> SplitSummary {
    let num_classes = assignment.counts.len();
    let total_subclasses = assignment.counts.values().map(Vec::len).sum();
    let num_unsplit = assignment
        .counts
        .values()
        .filter(|per_k| per_k.len() == 1)
        .count();
    let min_subclass_count = assignment
        .counts
        .values()
        .flatten()
        .copied()
        .min()
        .unwrap_or(0);
    SplitSummary {
        num_classes,
        total_subclasses,
        num_unsplit,
        min_subclass_count,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    config_hash: String,
    master_seed: u64,
    stage_seeds: BTreeMap<String, u64>,
    artifacts: Vec<String>,
}

fn update_manifest(
    out_dir: &Path,
    config: &PipelineConfig,
    stage: &str,
    artifacts: &[&str],
) -> Result<()> {
    let path = out_dir.join("manifest.json");
    let mut manifest: Manifest = if path.exists() {
        read_json(&path)?
    } else {
        Manifest {
            config_hash: config.config_hash(),
            master_seed: config.seed,
            stage_seeds: BTreeMap::new(),
            artifacts: Vec::new(),
        }
    };
    manifest.config_hash = config.config_hash();
    manifest.master_seed = config.seed;
    manifest
        .stage_seeds
        .insert(stage.to_string(), config.stage_seed(stage));
    for a in artifacts {
        if !manifest.artifacts.iter().any(|x| x == a) {
            manifest.artifacts.push(a.to_string());
        }
    }
    manifest.artifacts.sort();
    write_json(&path, &manifest)
}

// ---------------------------------------------------------------------------
// Stage commands (file-based, used by the CLI)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TierArtifact {
    partition: TierPartition,
    targets: BTreeMap<usize, usize>,
    counts: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GmmArtifact {
    models: BTreeMap<usize, GmmModel>,
    assignment: SubclassAssignment,
    ebic_tables: Vec<EbicTable>,
    summary: SplitSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SourceArtifact {
    params: SourceParams,
    before: GeometryDiagnostics,
    after: GeometryDiagnostics,
}

pub fn cmd_generate(config: &PipelineConfig) -> Result<()> {
    config.validate()?;
    let out = &config.out_dir;
    fs::create_dir_all(out)?;
    let mut spec = config.dataset.clone();
    spec.seed = config.stage_seed("generate");
    let samples = synthbench::generate_dataset(&spec)?;
    let counts = synthbench::class_counts(&samples);
    let partition = synthbench::partition_classes(&counts)?;
    let targets = synthbench::augmentation_targets(&partition, &counts);
    write_dataset_csv(&out.join("dataset.csv"), &samples, spec.dimension)?;
    write_json(
        &out.join("tiers.json"),
        &TierArtifact {
            partition,
            targets,
            counts,
        },
    )?;
    update_manifest(out, config, "generate", &["dataset.csv", "tiers.json"])
}

pub fn cmd_fit_subclasses(config: &PipelineConfig) -> Result<()> {
    let out = &config.out_dir;
    let mut samples = read_dataset_csv(&out.join("dataset.csv"))?;
    let (models, assignment, ebic_tables) = gmm::fit_subclasses(
        &mut samples,
        &config.gmm,
        config.stage_seed("fit-subclasses"),
    )?;
    write_dataset_csv(&out.join("dataset.csv"), &samples, config.dataset.dimension)?;
    let summary = split_summary(&assignment);
    write_json(
        &out.join("gmm.json"),
        &GmmArtifact {
            models,
            assignment,
            ebic_tables,
            summary,
        },
    )?;
    update_manifest(out, config, "fit-subclasses", &["dataset.csv", "gmm.json"])
}

pub fn cmd_optimize_sources(config: &PipelineConfig) -> Result<()> {
    let out = &config.out_dir;
    let samples = read_dataset_csv(&out.join("dataset.csv"))?;
    let gmm_artifact: GmmArtifact = read_json(&out.join("gmm.json"))?;
    let centers: BTreeMap<usize, Vec<f64>> = gmm_artifact
        .models
        .iter()
        .map(|(&c, m)| (c, m.class_center.clone()))
        .collect();
    let caps = sourceopt::compute_caps(&samples, &centers)?;
    let init = sourceopt::init_sources(&gmm_artifact.models, &caps)?;
    let mut opt_config = config.source_opt.clone();
    opt_config.seed = config.stage_seed("optimize-sources");
    let result = sourceopt::optimize_sources(&samples, &init, &opt_config)?;
    let caps_list: Vec<((usize, usize), f64)> = caps.into_iter().collect();
    write_json(&out.join("caps.json"), &caps_list)?;
    write_json(
        &out.join("sources.json"),
        &SourceArtifact {
            params: result.params,
            before: result.before,
            after: result.after,
        },
    )?;
    write_trace_csv(&out.join("source_trace.csv"), &result.trace)?;
    update_manifest(
        out,
        config,
        "optimize-sources",
        &["caps.json", "sources.json", "source_trace.csv"],
    )
}

fn load_sources(config: &PipelineConfig) -> Result<Option<SourceParams>> {
    let path = config.out_dir.join("sources.json");
    if config.fm.source == SourceMode::Standard {
        return Ok(None);
    }
    if !path.exists() {
        return Err(SubflowError::InvalidInput(
            "sources.json missing; run optimize-sources first or set fm.source = standard".into(),
        ));
    }
    let artifact: SourceArtifact = read_json(&path)?;
    Ok(Some(artifact.params))
}

pub fn cmd_train(config: &PipelineConfig) -> Result<()> {
    let out = &config.out_dir;
    let samples = read_dataset_csv(&out.join("dataset.csv"))?;
    let gmm_artifact: GmmArtifact = read_json(&out.join("gmm.json"))?;
    let sources = load_sources(config)?;
    let mut fm_config = config.fm.clone();
    fm_config.seed = config.stage_seed("train");
    let class_subclasses: BTreeMap<usize, usize> = gmm_artifact
        .models
        .iter()
        .map(|(&c, m)| (c, m.k))
        .collect();
    let cond_index = CondIndex::new(&class_subclasses);
    let (field, trace) = fm::train_fm(&samples, sources.as_ref(), cond_index, &fm_config)?;
    field.save(&out.join("model"), &fm_config)?;
    write_trace_csv(&out.join("fm_trace.csv"), &trace)?;
    update_manifest(
        out,
        config,
        "train",
        &["model.bin", "model.json", "fm_trace.csv"],
    )
}

pub fn cmd_sample(config: &PipelineConfig, plots: bool) -> Result<()> {
    let out = &config.out_dir;
    let samples = read_dataset_csv(&out.join("dataset.csv"))?;
    let tiers: TierArtifact = read_json(&out.join("tiers.json"))?;
    let gmm_artifact: GmmArtifact = read_json(&out.join("gmm.json"))?;
    let sources = load_sources(config)?;
    let (field, fm_config) = VelocityField::load(&out.join("model"))?;
    let syn_counts = synthbench::synthetic_counts(&tiers.targets, &tiers.counts);
    let template = SampleRequest {
        class: 0,
        count: 1,
        steps: config.sample_steps,
        seed: config.stage_seed("sample"),
        conditioning: fm_config.conditioning,
        source: fm_config.source,
        integrator: Integrator::Euler,
    };
    let augmented = sampler::synthesize_augmentation(
        &field,
        sources.as_ref(),
        &gmm_artifact.assignment.weights,
        &syn_counts,
        &samples,
        &template,
    )?;
    write_dataset_csv(
        &out.join("augmented.csv"),
        &augmented,
        config.dataset.dimension,
    )?;
    let mut artifacts = vec!["augmented.csv".to_string()];
    if plots {
        let plot_dir = out.join("plots");
        fs::create_dir_all(&plot_dir)?;
        for &class in tiers.counts.keys() {
            let file = format!("class_{class}.svg");
            write_class_scatter_svg(&plot_dir.join(&file), &augmented, class)?;
            artifacts.push(format!("plots/{file}"));
        }
    }
    let refs: Vec<&str> = artifacts.iter().map(String::as_str).collect();
    update_manifest(out, config, "sample", &refs)
}

pub fn cmd_evaluate(config: &PipelineConfig) -> Result<()> {
    let out = &config.out_dir;
    let real = read_dataset_csv(&out.join("dataset.csv"))?;
    let augmented = read_dataset_csv(&out.join("augmented.csv"))?;
    let tiers: TierArtifact = read_json(&out.join("tiers.json"))?;
    let gmm_artifact: GmmArtifact = read_json(&out.join("gmm.json"))?;
    let sources = load_sources(config)?;
    let (field, fm_config) = VelocityField::load(&out.join("model"))?;
    let source_artifact: Option<SourceArtifact> = if out.join("sources.json").exists() {
        Some(read_json(&out.join("sources.json"))?)
    } else {
        None
    };
    let artifacts = PipelineArtifacts {
        real,
        partition: tiers.partition,
        targets: tiers.targets,
        models: gmm_artifact.models,
        assignment: gmm_artifact.assignment,
        ebic_tables: gmm_artifact.ebic_tables,
        sources,
        opt: None,
        field,
        fm_config,
        fm_trace: Vec::new(),
        augmented,
    };
    let mut report = evaluate_pipeline(config, &artifacts)?;
    report.geometry = source_artifact
        .map(|a| eval::GeometryDiagnosticsSnapshot::from_pair(&a.before, &a.after));
    write_json(&out.join("eval_report.json"), &report)?;
    write_eval_summary_csv(&out.join("eval_summary.csv"), &report)?;
    update_manifest(
        out,
        config,
        "evaluate",
        &["eval_report.json", "eval_summary.csv"],
    )
}

fn write_eval_summary_csv(path: &Path, report: &PipelineReport) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["metric", "value"])?;
    let rows: Vec<(String, f64)> = [
        ("frechet_tail_mean", report.frechet_tail_mean),
        ("mode_recall_tail_mean", report.mode_recall_tail_mean),
        ("balanced_accuracy", report.balanced_accuracy),
        ("macro_f1", report.macro_f1),
        (
            "balanced_accuracy_real_only",
            report.balanced_accuracy_real_only,
        ),
        ("macro_f1_real_only", report.macro_f1_real_only),
        ("knn_purity_learned", report.knn_purity_learned),
        ("knn_purity_random", report.knn_purity_random),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .chain(
        report
            .frechet_per_class
            .iter()
            .map(|(c, v)| (format!("frechet_class_{c}"), *v)),
    )
    .chain(
        report
            .mode_recall_per_class
            .iter()
            .map(|(c, v)| (format!("mode_recall_class_{c}"), *v)),
    )
    .collect();
    for (k, v) in rows {
        writer.write_record([k, format!("{v:?}")])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn cmd_run_all(config: &PipelineConfig, plots: bool) -> Result<()> {
    cmd_generate(config)?;
    cmd_fit_subclasses(config)?;
    if config.fm.source == SourceMode::Learned {
        cmd_optimize_sources(config)?;
    }
    cmd_train(config)?;
    cmd_sample(config, plots)?;
    cmd_evaluate(config)
}

pub fn cmd_ablate(config: &PipelineConfig, n_seeds: usize) -> Result<()> {
    config.validate()?;
    let out = &config.out_dir;
    fs::create_dir_all(out)?;
    let cells = run_ablation(config, n_seeds)?;
    write_json(&out.join("ablation.json"), &cells)?;
    let mut writer = csv::Writer::from_path(out.join("ablation.csv"))?;
    writer.write_record([
        "subclass",
        "optimized_source",
        "balanced_accuracy",
        "macro_f1",
        "frechet_tail_mean",
        "mode_recall_tail_mean",
    ])?;
    for cell in &cells {
        writer.write_record([
            cell.variant.subclass.to_string(),
            cell.variant.optimize.to_string(),
            format!("{:?}", cell.mean_balanced_accuracy),
            format!("{:?}", cell.mean_macro_f1),
            format!("{:?}", cell.mean_frechet_tail),
            format!("{:?}", cell.mean_mode_recall_tail),
        ])?;
    }
    writer.flush()?;
    update_manifest(out, config, "ablate", &["ablation.json", "ablation.csv"])
}

// ---------------------------------------------------------------------------
// Plots
// ---------------------------------------------------------------------------

/// Minimal scatter SVG: real rows of `class` in blue, synthetic in red.
pub fn write_class_scatter_svg(
    path: &Path,
    samples: &[LabeledSample],
    class: usize,
) -> Result<()> {
    let rows: Vec<&LabeledSample> = samples.iter().filter(|s| s.class == class).collect();
    if rows.is_empty() {
        return Err(SubflowError::EmptyGroup(format!("no rows for class {class}")));
    }
    let (mut lo_x, mut hi_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut lo_y, mut hi_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in &rows {
        lo_x = lo_x.min(s.x1[0]);
        hi_x = hi_x.max(s.x1[0]);
        let y = if s.x1.len() > 1 { s.x1[1] } else { 0.0 };
        lo_y = lo_y.min(y);
        hi_y = hi_y.max(y);
    }
    let pad_x = ((hi_x - lo_x) * 0.05).max(1e-6);
    let pad_y = ((hi_y - lo_y) * 0.05).max(1e-6);
    lo_x -= pad_x;
    hi_x += pad_x;
    lo_y -= pad_y;
    hi_y += pad_y;
    let size = 480.0;
    let sx = |x: f64| (x - lo_x) / (hi_x - lo_x) * size;
    let sy = |y: f64| size - (y - lo_y) / (hi_y - lo_y) * size;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" \
         viewBox=\"0 0 {size} {size}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for s in &rows {
        let y = if s.x1.len() > 1 { s.x1[1] } else { 0.0 };
        let color = if s.synthetic { "#d62728" } else { "#1f77b4" };
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{color}\" fill-opacity=\"0.6\"/>\n",
            sx(s.x1[0]),
            sy(y)
        ));
    }
    svg.push_str("</svg>\n");
    let mut file = fs::File::create(path)?;
    file.write_all(svg.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_config(out: &Path) -> PipelineConfig {
        let mut config = default_config();
        // Shrink every budget so pipeline tests run in seconds.
        config.dataset.classes[0].count = 400;
        config.dataset.classes[1].count = 200;
        config.dataset.classes[2].count = 160;
        config.source_opt.steps = 200;
        config.fm.steps = 300;
        config.fm.batch_size = 64;
        config.fm.hidden = vec![32];
        config.sample_steps = 16;
        config.eval.gen_per_class = 60;
        config.eval.classifier_runs = 1;
        config.eval.test_per_class = 8;
        config.out_dir = out.to_path_buf();
        config.seed = 11;
        config
    }

    #[test]
    fn csv_roundtrip_preserves_samples() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let samples = vec![
            LabeledSample {
                x1: vec![0.125, -3.5],
                class: 0,
                true_mode: Some(1),
                subclass: Some(2),
                synthetic: false,
            },
            LabeledSample {
                x1: vec![1.0 / 3.0, 2.0f64.sqrt()],
                class: 7,
                true_mode: None,
                subclass: Some(0),
                synthetic: true,
            },
        ];
        write_dataset_csv(&path, &samples, 2).unwrap();
        let back = read_dataset_csv(&path).unwrap();
        assert_eq!(samples, back);
    }

    #[test]
    fn csv_without_optional_columns() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let samples = vec![LabeledSample {
            x1: vec![1.0, 2.0],
            class: 3,
            true_mode: Some(0),
            subclass: None,
            synthetic: false,
        }];
        write_dataset_csv(&path, &samples, 2).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("class,true_mode,x_0,x_1\n"));
        assert_eq!(read_dataset_csv(&path).unwrap(), samples);
    }

    #[test]
    fn default_benchmark_tiers_and_targets() {
        let spec = default_benchmark_spec();
        spec.validate().unwrap();
        let mut spec = spec;
        spec.seed = 5;
        let samples = synthbench::generate_dataset(&spec).unwrap();
        let counts = synthbench::class_counts(&samples);
        let partition = synthbench::partition_classes(&counts).unwrap();
        assert_eq!(partition.dominant, 0);
        assert_eq!(partition.median, 200.0);
        for class in 1..=5usize {
            assert_eq!(partition.tiers[&class], Tier::Mt);
        }
        assert_eq!(partition.tiers[&6], Tier::Lt);
        assert_eq!(partition.tiers[&7], Tier::Ult);
        let targets = synthbench::augmentation_targets(&partition, &counts);
        for class in 1..=5usize {
            assert_eq!(targets[&class], 500);
        }
        assert_eq!(targets[&6], 200);
        assert_eq!(targets[&7], 100);
    }

    #[test]
    fn stage_seeds_differ_and_are_stable() {
        let config = default_config();
        let a = config.stage_seed("generate");
        let b = config.stage_seed("train");
        assert_ne!(a, b);
        assert_eq!(a, config.stage_seed("generate"));
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = default_config();
        let mut b = default_config();
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed = 99;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn run_all_smoke_and_deterministic() {
        let dir1 = tempdir().unwrap();
        let dir2 = tempdir().unwrap();
        let mut c1 = tiny_config(dir1.path());
        let mut c2 = tiny_config(dir2.path());
        c1.out_dir = dir1.path().join("out");
        c2.out_dir = dir2.path().join("out");
        cmd_run_all(&c1, true).unwrap();
        cmd_run_all(&c2, false).unwrap();
        for name in [
            "dataset.csv",
            "augmented.csv",
            "gmm.json",
            "sources.json",
            "eval_report.json",
        ] {
            let a = fs::read(c1.out_dir.join(name)).unwrap();
            let b = fs::read(c2.out_dir.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
        assert!(c1.out_dir.join("plots/class_0.svg").exists());
        let report: PipelineReport =
            read_json(&c1.out_dir.join("eval_report.json")).unwrap();
        assert!(report.balanced_accuracy.is_finite());
        assert!(report.geometry.is_some());
    }

    #[test]
    fn variant_labels_unique() {
        let labels: Vec<String> = Variant::GRID.iter().map(|v| v.label()).collect();
        let mut dedup = labels.clone();
        dedup.dedup();
        assert_eq!(labels.len(), 4);
        assert_eq!(labels, dedup);
    }

    #[test]
    fn malformed_config_reports_field() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, "{\"dataset\": {\"classes\": []}}").unwrap();
        let err = PipelineConfig::from_json_file(&path).unwrap_err();
        assert!(matches!(err, SubflowError::Config(_)), "{err}");
    }
}
