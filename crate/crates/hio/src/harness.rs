//! Experiment driver: configuration, speaker-independent cross-validation,
//! variant comparison, metrics, and report emission.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    gen_synthetic, split_folds, Dataset, DatasetError, FoldPlan, SyntheticConfig, TRAIT_CREDIBILITY,
    TRAIT_PASSION, TRAIT_PERSUASION,
};
use crate::features::{
    apply_selection, ttest_select, FeatureError, SelectionResult, TernaryClass, TtestGrouping,
    N_CLASSES,
};
use crate::hierarchy::{
    build_late_fusion, derive_seed, train_hio, train_late_fusion, train_stacking, GateConfig,
    GateDecision, HierArchitecture, HierarchyError, IntermediateTask, TrainOptions, TraitSet,
};
use crate::nn::TrainConfig;

#[derive(Error, Debug)]
pub enum HarnessError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        source: Box<HarnessError>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("comparison error: {0}")]
    Comparison(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("report format: {0}")]
    Format(#[from] serde_json::Error),
    #[error("csv parse error at {path}:{line}: {message}")]
    Csv {
        path: String,
        line: usize,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelVariant {
    LateFusionBaseline,
    Stacking,
    Hio,
    FrozenStacking,
    TextOnly,
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelVariant::LateFusionBaseline => "late-fusion-baseline",
            ModelVariant::Stacking => "stacking",
            ModelVariant::Hio => "hio",
            ModelVariant::FrozenStacking => "frozen-stacking",
            ModelVariant::TextOnly => "text-only",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_lowercase().replace('_', "-").as_str() {
            "late-fusion-baseline" | "late-fusion" | "baseline" => {
                Ok(ModelVariant::LateFusionBaseline)
            }
            "stacking" => Ok(ModelVariant::Stacking),
            "hio" => Ok(ModelVariant::Hio),
            "frozen-stacking" => Ok(ModelVariant::FrozenStacking),
            "text-only" | "text" => Ok(ModelVariant::TextOnly),
            other => Err(format!("unknown model variant {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetSource {
    File(PathBuf),
    Synthetic(SyntheticConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub source: DatasetSource,
    pub variant: ModelVariant,
    pub gate: GateConfig,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub arch: HierArchitecture,
    /// Number of t-test-selected features.
    pub feature_k: usize,
    pub ttest_grouping: TtestGrouping,
    pub n_folds: usize,
    pub seed: u64,
    /// Reduced pretraining regime: pretrain the intermediate networks on
    /// only this many training folds. `None` uses all training folds.
    pub n_pretrain_folds: Option<usize>,
}

impl ExperimentConfig {
    pub fn new(source: DatasetSource, variant: ModelVariant) -> ExperimentConfig {
        ExperimentConfig {
            source,
            variant,
            gate: GateConfig::default(),
            pretrain: TrainConfig::default(),
            train: TrainConfig::default(),
            arch: HierArchitecture::default(),
            feature_k: 100,
            ttest_grouping: TtestGrouping::default(),
            n_folds: 10,
            seed: 42,
            n_pretrain_folds: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_folds < 3 {
            return Err(HarnessError::Config(
                "need at least 3 folds (train/validation/test)".into(),
            ));
        }
        if self.feature_k == 0 {
            return Err(HarnessError::Config("feature_k must be positive".into()));
        }
        self.gate
            .validate()
            .map_err(HarnessError::Hierarchy)?;
        self.train.validate().map_err(|e| HarnessError::Hierarchy(e.into()))?;
        self.pretrain
            .validate()
            .map_err(|e| HarnessError::Hierarchy(e.into()))?;
        Ok(())
    }
}

/// Per-fold training/evaluation series for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FoldSeries {
    pub train_loss_per_epoch: Vec<f64>,
    pub val_accuracy_checkpoints: Vec<(u32, f64)>,
    /// Cumulative gate acceptance fraction, one entry per gate decision.
    pub accept_rate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub validation_fold: usize,
    pub pretrain_folds: Vec<usize>,
    pub test_accuracy: f64,
    /// Rows are true classes, columns predicted.
    pub confusion: [[u64; N_CLASSES]; N_CLASSES],
    /// (accepts, reverts) for the passion network.
    pub passion_gate: (u64, u64),
    /// (accepts, reverts) for the credibility network.
    pub credibility_gate: (u64, u64),
    pub series: FoldSeries,
    #[serde(skip)]
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
    /// Full gate-decision log, per fold.
    pub decisions: Vec<Vec<GateDecision>>,
}

impl RunReport {
    /// Deterministic serialization: identical config and seed produce a
    /// byte-identical string (wall-clock timings are excluded).
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.canonical_json()).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<RunReport> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn resolve_dataset(source: &DatasetSource) -> Result<Dataset> {
    Ok(match source {
        DatasetSource::File(path) => Dataset::load(path)?,
        DatasetSource::Synthetic(cfg) => gen_synthetic(cfg)?,
    })
}

struct PreparedFold {
    pretrain: TraitSet,
    train: TraitSet,
    val: TraitSet,
    test: TraitSet,
    validation_fold: usize,
    pretrain_folds: Vec<usize>,
    /// Selected fused-feature indices grouped per modality, in modality
    /// order (for the late-fusion split).
    modality_groups: Vec<(String, Vec<usize>)>,
}

fn labels_of(ds: &Dataset, idx: &[usize], trait_name: &str) -> Result<Vec<usize>> {
    idx.iter()
        .map(|&i| Ok(ds.samples()[i].label(trait_name)?.index()))
        .collect()
}

fn prepare_fold(
    ds: &Dataset,
    plan: &FoldPlan,
    test_fold: usize,
    cfg: &ExperimentConfig,
) -> Result<PreparedFold> {
    // Seeded draw of the validation fold from the training folds.
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1000 + test_fold as u64));
    let candidates: Vec<usize> = (0..plan.n_folds).filter(|&f| f != test_fold).collect();
    let validation_fold = candidates[rng.gen_range(0..candidates.len())];

    let fold_of = |i: usize| plan.fold_of(&ds.samples()[i].sample_id).unwrap();
    let all: Vec<usize> = (0..ds.len()).collect();
    let train_idx: Vec<usize> = all
        .iter()
        .copied()
        .filter(|&i| fold_of(i) != test_fold && fold_of(i) != validation_fold)
        .collect();
    let val_idx: Vec<usize> = all.iter().copied().filter(|&i| fold_of(i) == validation_fold).collect();
    let test_idx: Vec<usize> = all.iter().copied().filter(|&i| fold_of(i) == test_fold).collect();

    // Reduced pretraining subset, if requested.
    let pretrain_folds = match cfg.n_pretrain_folds {
        None => {
            let mut fs: Vec<usize> = (0..plan.n_folds)
                .filter(|&f| f != test_fold && f != validation_fold)
                .collect();
            fs.sort_unstable();
            fs
        }
        Some(n) => crate::dataset::semisupervised_plan(
            plan,
            n,
            test_fold,
            validation_fold,
            derive_seed(cfg.seed, 2000 + test_fold as u64),
        )?,
    };
    let pretrain_idx: Vec<usize> = train_idx
        .iter()
        .copied()
        .filter(|&i| pretrain_folds.contains(&fold_of(i)))
        .collect();

    // Fit feature selection on the training folds only.
    let train_features: Vec<Vec<f64>> = train_idx
        .iter()
        .map(|&i| ds.fused_features(&ds.samples()[i]))
        .collect();
    let train_pers_classes: Vec<TernaryClass> = train_idx
        .iter()
        .map(|&i| ds.samples()[i].label(TRAIT_PERSUASION))
        .collect::<std::result::Result<_, _>>()?;
    let selection = ttest_select(
        &train_features,
        &train_pers_classes,
        cfg.feature_k,
        cfg.ttest_grouping,
    )?;

    // Selected indices grouped by source modality, modality order preserved.
    let mut boundaries: Vec<(String, std::ops::Range<usize>)> = Vec::new();
    let mut offset = 0;
    for (name, &w) in ds.modality_widths() {
        boundaries.push((name.clone(), offset..offset + w));
        offset += w;
    }
    let mut modality_groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (name, range) in &boundaries {
        let in_modality: Vec<usize> = selection
            .selected_indices
            .iter()
            .copied()
            .filter(|i| range.contains(i))
            .collect();
        if !in_modality.is_empty() {
            modality_groups.push((name.clone(), in_modality));
        }
    }
    // Project in modality-grouped order so late-fusion slices are contiguous.
    let flat_indices: Vec<usize> = modality_groups
        .iter()
        .flat_map(|(_, g)| g.iter().copied())
        .collect();
    let grouped_selection = SelectionResult {
        selected_indices: flat_indices,
        t_statistics: selection.t_statistics.clone(),
        p_values: selection.p_values.clone(),
    };

    let build_set = |idx: &[usize]| -> Result<TraitSet> {
        Ok(TraitSet {
            xs: idx
                .iter()
                .map(|&i| apply_selection(&grouped_selection, &ds.fused_features(&ds.samples()[i])))
                .collect(),
            passion: labels_of(ds, idx, TRAIT_PASSION)?,
            credibility: labels_of(ds, idx, TRAIT_CREDIBILITY)?,
            persuasion: labels_of(ds, idx, TRAIT_PERSUASION)?,
        })
    };
    Ok(PreparedFold {
        pretrain: build_set(&pretrain_idx)?,
        train: build_set(&train_idx)?,
        val: build_set(&val_idx)?,
        test: build_set(&test_idx)?,
        validation_fold,
        pretrain_folds,
        modality_groups,
    })
}

fn confusion_and_accuracy(
    predictions: &[usize],
    truth: &[usize],
) -> ([[u64; N_CLASSES]; N_CLASSES], f64) {
    let mut confusion = [[0u64; N_CLASSES]; N_CLASSES];
    for (&p, &t) in predictions.iter().zip(truth) {
        confusion[t][p] += 1;
    }
    let trace: u64 = (0..N_CLASSES).map(|i| confusion[i][i]).sum();
    (confusion, trace as f64 / truth.len() as f64)
}

/// Cross-validation over every test fold: builds the fold plan, runs the
/// configured trainer per fold (folds run in parallel), and aggregates
/// accuracy. Deterministic given config and seed.
pub fn run_cv(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let mut ds = resolve_dataset(&cfg.source)?;
    if cfg.variant == ModelVariant::TextOnly {
        ds = ds.restrict_modalities(&["text".to_string()])?;
    }
    let plan = split_folds(&ds, cfg.n_folds, cfg.seed)?;

    let outcomes: Vec<(FoldResult, Vec<GateDecision>)> = (0..cfg.n_folds)
        .into_par_iter()
        .map(|fold| {
            run_fold(&ds, &plan, fold, cfg).map_err(|e| HarnessError::Fold {
                fold,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let folds: Vec<FoldResult> = outcomes.iter().map(|(f, _)| f.clone()).collect();
    let decisions: Vec<Vec<GateDecision>> = outcomes.into_iter().map(|(_, d)| d).collect();
    let mean_accuracy =
        folds.iter().map(|f| f.test_accuracy).sum::<f64>() / folds.len() as f64;
    Ok(RunReport {
        config: cfg.clone(),
        folds,
        mean_accuracy,
        decisions,
    })
}

fn run_fold(
    ds: &Dataset,
    plan: &FoldPlan,
    fold: usize,
    cfg: &ExperimentConfig,
) -> Result<(FoldResult, Vec<GateDecision>)> {
    let start = Instant::now();
    let prepared = prepare_fold(ds, plan, fold, cfg)?;
    let fold_seed = derive_seed(cfg.seed, 3000 + fold as u64);

    let mut decisions: Vec<GateDecision> = Vec::new();
    let mut series = FoldSeries::default();
    let predictions: Vec<usize> = match cfg.variant {
        ModelVariant::LateFusionBaseline => {
            let dims: Vec<usize> = prepared.modality_groups.iter().map(|(_, g)| g.len()).collect();
            let mut model = build_late_fusion(&dims, fold_seed)?;
            train_late_fusion(
                &mut model,
                &prepared.train.xs,
                &prepared.train.persuasion,
                &prepared.val.xs,
                &prepared.val.persuasion,
                &cfg.train,
            )?;
            prepared
                .test
                .xs
                .iter()
                .map(|x| Ok(crate::nn::argmax(&model.forward(x)?)))
                .collect::<Result<_>>()?
        }
        ModelVariant::Hio | ModelVariant::Stacking | ModelVariant::FrozenStacking
        | ModelVariant::TextOnly => {
            let opts = TrainOptions {
                arch: cfg.arch.clone(),
                gate: cfg.gate.clone(),
                pretrain: cfg.pretrain.clone(),
                train: cfg.train.clone(),
                frozen_intermediates: false,
                seed: fold_seed,
            };
            let fit = match cfg.variant {
                ModelVariant::Hio | ModelVariant::TextOnly => {
                    train_hio(&prepared.pretrain, &prepared.train, &prepared.val, &opts)?
                }
                ModelVariant::Stacking => {
                    train_stacking(&prepared.pretrain, &prepared.train, &prepared.val, &opts, false)?
                }
                ModelVariant::FrozenStacking => {
                    train_stacking(&prepared.pretrain, &prepared.train, &prepared.val, &opts, true)?
                }
                _ => unreachable!(),
            };
            decisions = fit.decisions;
            series.train_loss_per_epoch = fit.train_loss_per_epoch;
            series.val_accuracy_checkpoints = fit.val_accuracy_checkpoints;
            let mut accepted = 0u64;
            for (i, d) in decisions.iter().enumerate() {
                if d.accepted {
                    accepted += 1;
                }
                series.accept_rate.push(accepted as f64 / (i + 1) as f64);
            }
            prepared
                .test
                .xs
                .iter()
                .map(|x| Ok(crate::nn::argmax(&fit.model.forward(x)?)))
                .collect::<Result<_>>()?
        }
    };

    let (confusion, test_accuracy) = confusion_and_accuracy(&predictions, &prepared.test.persuasion);
    let gate_counts = |task: IntermediateTask| {
        let accepts = decisions
            .iter()
            .filter(|d| d.network == task && d.accepted)
            .count() as u64;
        let reverts = decisions
            .iter()
            .filter(|d| d.network == task && !d.accepted)
            .count() as u64;
        (accepts, reverts)
    };
    let result = FoldResult {
        fold,
        validation_fold: prepared.validation_fold,
        pretrain_folds: prepared.pretrain_folds,
        test_accuracy,
        confusion,
        passion_gate: gate_counts(IntermediateTask::Passion),
        credibility_gate: gate_counts(IntermediateTask::Credibility),
        series,
        wall_secs: start.elapsed().as_secs_f64(),
    };
    Ok((result, decisions))
}

/// Per-variant outcome of a paired comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: ModelVariant,
    pub mean_accuracy: f64,
    pub fold_accuracies: Vec<f64>,
    pub gate_accepts: u64,
    pub gate_reverts: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub variants: Vec<VariantSummary>,
    /// Per-fold accuracy differences of each variant against the first.
    pub paired_differences: Vec<Vec<f64>>,
    pub reports: Vec<RunReport>,
}

/// Runs every configuration (all must share dataset source, folds, and seed
/// so comparisons are paired) and tabulates paired per-fold differences
/// against the first variant.
pub fn compare_variants(cfgs: &[ExperimentConfig]) -> Result<Comparison> {
    let first = cfgs
        .first()
        .ok_or_else(|| HarnessError::Comparison("no configurations given".into()))?;
    for c in cfgs {
        if c.source != first.source || c.n_folds != first.n_folds || c.seed != first.seed {
            return Err(HarnessError::Comparison(
                "all configurations must share dataset, folds, and seed".into(),
            ));
        }
    }
    let reports: Vec<RunReport> = cfgs.iter().map(run_cv).collect::<Result<_>>()?;
    let variants = reports
        .iter()
        .map(|r| VariantSummary {
            variant: r.config.variant,
            mean_accuracy: r.mean_accuracy,
            fold_accuracies: r.folds.iter().map(|f| f.test_accuracy).collect(),
            gate_accepts: r
                .folds
                .iter()
                .map(|f| f.passion_gate.0 + f.credibility_gate.0)
                .sum(),
            gate_reverts: r
                .folds
                .iter()
                .map(|f| f.passion_gate.1 + f.credibility_gate.1)
                .sum(),
        })
        .collect::<Vec<_>>();
    let baseline = &variants[0].fold_accuracies;
    let paired_differences = variants
        .iter()
        .map(|v| {
            v.fold_accuracies
                .iter()
                .zip(baseline)
                .map(|(a, b)| a - b)
                .collect()
        })
        .collect();
    Ok(Comparison {
        variants,
        paired_differences,
        reports,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| HarnessError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// One metrics row as reloaded from the emitted CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub fold: usize,
    pub validation_fold: usize,
    pub test_accuracy: f64,
    pub confusion: [[u64; N_CLASSES]; N_CLASSES],
    pub passion_gate: (u64, u64),
    pub credibility_gate: (u64, u64),
}

pub fn metrics_csv(report: &RunReport) -> String {
    let mut out = String::from(
        "fold,validation_fold,test_accuracy,\
         c00,c01,c02,c10,c11,c12,c20,c21,c22,\
         passion_accepts,passion_reverts,credibility_accepts,credibility_reverts\n",
    );
    for f in &report.folds {
        let c = &f.confusion;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            f.fold,
            f.validation_fold,
            f.test_accuracy,
            c[0][0], c[0][1], c[0][2], c[1][0], c[1][1], c[1][2], c[2][0], c[2][1], c[2][2],
            f.passion_gate.0, f.passion_gate.1, f.credibility_gate.0, f.credibility_gate.1,
        ));
    }
    out
}

pub fn parse_metrics_csv(text: &str, path: &str) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| HarnessError::Csv {
            path: path.to_string(),
            line: i + 1,
            message,
        };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 16 {
            return Err(err(format!("expected 16 columns, got {}", cols.len())));
        }
        let pu = |s: &str| s.trim().parse::<u64>().map_err(|e| err(e.to_string()));
        let pf = |s: &str| s.trim().parse::<f64>().map_err(|e| err(e.to_string()));
        let mut confusion = [[0u64; N_CLASSES]; N_CLASSES];
        for r in 0..N_CLASSES {
            for cidx in 0..N_CLASSES {
                confusion[r][cidx] = pu(cols[3 + r * N_CLASSES + cidx])?;
            }
        }
        rows.push(MetricsRow {
            fold: pu(cols[0])? as usize,
            validation_fold: pu(cols[1])? as usize,
            test_accuracy: pf(cols[2])?,
            confusion,
            passion_gate: (pu(cols[12])?, pu(cols[13])?),
            credibility_gate: (pu(cols[14])?, pu(cols[15])?),
        });
    }
    Ok(rows)
}

#[derive(Serialize)]
struct DecisionRecord<'a> {
    fold: usize,
    #[serde(flatten)]
    decision: &'a GateDecision,
}

/// Writes the report bundle: per-fold metrics CSV, the gate-decision log as
/// JSON lines, plot-ready series, a human-readable summary, and the full
/// report JSON for exact re-emission.
pub fn emit_report(report: &RunReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let mut written = Vec::new();

    let metrics_path = out_dir.join("metrics.csv");
    write_file(&metrics_path, &metrics_csv(report))?;
    written.push(metrics_path);

    let decisions_path = out_dir.join("decisions.jsonl");
    {
        let mut buf = Vec::new();
        for (fold, fold_decisions) in report.decisions.iter().enumerate() {
            for d in fold_decisions {
                let record = DecisionRecord { fold, decision: d };
                serde_json::to_writer(&mut buf, &record)?;
                buf.push(b'\n');
            }
        }
        std::fs::write(&decisions_path, &buf).map_err(|e| HarnessError::Io {
            path: decisions_path.display().to_string(),
            source: e,
        })?;
    }
    written.push(decisions_path);

    let series_path = out_dir.join("series.csv");
    {
        let mut out = String::from("fold,series,index,value\n");
        for f in &report.folds {
            for (i, v) in f.series.train_loss_per_epoch.iter().enumerate() {
                out.push_str(&format!("{},train_loss,{},{}\n", f.fold, i + 1, v));
            }
            for (epoch, acc) in &f.series.val_accuracy_checkpoints {
                out.push_str(&format!("{},val_accuracy,{},{}\n", f.fold, epoch, acc));
            }
            for (i, r) in f.series.accept_rate.iter().enumerate() {
                out.push_str(&format!("{},accept_rate,{},{}\n", f.fold, i + 1, r));
            }
        }
        write_file(&series_path, &out)?;
    }
    written.push(series_path);

    let summary_path = out_dir.join("summary.txt");
    write_file(&summary_path, &summary_text(report))?;
    written.push(summary_path);

    let report_path = out_dir.join("report.json");
    report.save(&report_path)?;
    written.push(report_path);
    Ok(written)
}

/// Human-readable run summary; self-describing (variant, epsilon, reference
/// mode, gate data, feature k, folds, seed).
pub fn summary_text(report: &RunReport) -> String {
    let cfg = &report.config;
    let mut out = String::new();
    out.push_str(&format!("variant:          {}\n", cfg.variant));
    out.push_str(&format!("epsilon:          {}\n", cfg.gate.epsilon));
    out.push_str(&format!("reference_mode:   {:?}\n", cfg.gate.reference_mode));
    out.push_str(&format!("gate_data:        {:?}\n", cfg.gate.gate_data));
    out.push_str(&format!("feature_k:        {}\n", cfg.feature_k));
    out.push_str(&format!("n_folds:          {}\n", cfg.n_folds));
    out.push_str(&format!("seed:             {}\n", cfg.seed));
    if let Some(n) = cfg.n_pretrain_folds {
        out.push_str(&format!("pretrain_folds:   {n}\n"));
    }
    out.push('\n');
    out.push_str("fold  val_fold  accuracy  accepts  reverts\n");
    for f in &report.folds {
        out.push_str(&format!(
            "{:>4}  {:>8}  {:>8.4}  {:>7}  {:>7}\n",
            f.fold,
            f.validation_fold,
            f.test_accuracy,
            f.passion_gate.0 + f.credibility_gate.0,
            f.passion_gate.1 + f.credibility_gate.1,
        ));
    }
    out.push_str(&format!("\nmean accuracy: {:.4}\n", report.mean_accuracy));
    out
}

/// Comparison table in CSV form: one row per variant plus paired diffs.
pub fn comparison_csv(cmp: &Comparison) -> String {
    let mut out = String::from("variant,mean_accuracy,gate_accepts,gate_reverts");
    let n_folds = cmp
        .variants
        .first()
        .map(|v| v.fold_accuracies.len())
        .unwrap_or(0);
    for i in 0..n_folds {
        out.push_str(&format!(",fold{i}"));
    }
    for i in 0..n_folds {
        out.push_str(&format!(",diff{i}"));
    }
    out.push('\n');
    for (v, diffs) in cmp.variants.iter().zip(&cmp.paired_differences) {
        out.push_str(&format!(
            "{},{},{},{}",
            v.variant, v.mean_accuracy, v.gate_accepts, v.gate_reverts
        ));
        for a in &v.fold_accuracies {
            out.push_str(&format!(",{a}"));
        }
        for d in diffs {
            out.push_str(&format!(",{d}"));
        }
        out.push('\n');
    }
    out
}

pub fn emit_comparison(cmp: &Comparison, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let mut written = Vec::new();
    let csv_path = out_dir.join("comparison.csv");
    write_file(&csv_path, &comparison_csv(cmp))?;
    written.push(csv_path);
    for report in &cmp.reports {
        let sub = out_dir.join(format!("variant_{}", report.config.variant));
        written.extend(emit_report(report, &sub)?);
    }
    Ok(written)
}

/// Majority-class frequency of the persuasion labels, the accuracy floor any
/// trained variant should beat.
pub fn majority_class_frequency(ds: &Dataset) -> Result<f64> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in ds.samples() {
        *counts.entry(s.label(TRAIT_PERSUASION)?.index()).or_insert(0) += 1;
    }
    Ok(*counts.values().max().unwrap() as f64 / ds.len() as f64)
}

// Keep stderr quiet in library code; CLI layers do the printing.
#[allow(dead_code)]
fn _assert_send_sync()
where
    RunReport: Send + Sync,
{
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::AcceptableErrorRate;

    fn small_synthetic() -> DatasetSource {
        DatasetSource::Synthetic(SyntheticConfig {
            n_samples: 120,
            n_speakers: 24,
            modality_widths: vec![6, 6, 6],
            ..Default::default()
        })
    }

    fn quick_cfg(variant: ModelVariant) -> ExperimentConfig {
        ExperimentConfig {
            pretrain: TrainConfig {
                epochs: 15,
                learning_rate: 2e-3,
                ..TrainConfig::default()
            },
            train: TrainConfig {
                epochs: 15,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            n_folds: 4,
            ..ExperimentConfig::new(small_synthetic(), variant)
        }
    }

    #[test]
    fn run_cv_is_deterministic_and_byte_identical() {
        let cfg = quick_cfg(ModelVariant::Hio);
        let a = run_cv(&cfg).unwrap();
        let b = run_cv(&cfg).unwrap();
        assert_eq!(a.canonical_json(), b.canonical_json());
    }

    #[test]
    fn mean_accuracy_is_arithmetic_mean_and_confusion_consistent() {
        let report = run_cv(&quick_cfg(ModelVariant::Stacking)).unwrap();
        let mean: f64 = report.folds.iter().map(|f| f.test_accuracy).sum::<f64>()
            / report.folds.len() as f64;
        assert_eq!(report.mean_accuracy, mean);
        for f in &report.folds {
            let total: u64 = f.confusion.iter().flatten().sum();
            let trace: u64 = (0..3).map(|i| f.confusion[i][i]).sum();
            assert!(total > 0);
            assert_eq!(trace as f64 / total as f64, f.test_accuracy);
            assert!((0.0..=1.0).contains(&f.test_accuracy));
        }
    }

    #[test]
    fn paired_comparison_with_self_is_all_zero() {
        let cfg = quick_cfg(ModelVariant::Stacking);
        let cmp = compare_variants(&[cfg.clone(), cfg]).unwrap();
        assert!(cmp.paired_differences[1].iter().all(|&d| d == 0.0));
    }

    #[test]
    fn comparison_rejects_mismatched_seeds() {
        let a = quick_cfg(ModelVariant::Hio);
        let mut b = quick_cfg(ModelVariant::Stacking);
        b.seed = 7;
        assert!(matches!(
            compare_variants(&[a, b]),
            Err(HarnessError::Comparison(_))
        ));
    }

    #[test]
    fn stacking_epsilon_is_forced_infinite() {
        // Even if the config carries a finite epsilon, the stacking variant
        // must behave as epsilon = infinity: every decision accepted.
        let mut cfg = quick_cfg(ModelVariant::Stacking);
        cfg.gate.epsilon = AcceptableErrorRate::Finite(0.5);
        let report = run_cv(&cfg).unwrap();
        for fold_decisions in &report.decisions {
            assert!(fold_decisions.iter().all(|d| d.accepted));
            assert!(fold_decisions
                .iter()
                .all(|d| d.epsilon == AcceptableErrorRate::Infinite));
        }
    }

    #[test]
    fn emit_and_reload_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_cv(&quick_cfg(ModelVariant::Hio)).unwrap();
        let files = emit_report(&report, dir.path()).unwrap();
        assert!(files.iter().all(|p| p.exists()));

        // CSV reloads to numerically identical per-fold metrics.
        let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let rows = parse_metrics_csv(&text, "metrics.csv").unwrap();
        assert_eq!(rows.len(), report.folds.len());
        for (row, f) in rows.iter().zip(&report.folds) {
            assert_eq!(row.fold, f.fold);
            assert_eq!(row.test_accuracy, f.test_accuracy);
            assert_eq!(row.confusion, f.confusion);
            assert_eq!(row.passion_gate, f.passion_gate);
            assert_eq!(row.credibility_gate, f.credibility_gate);
        }

        // Full report reloads identically.
        let reloaded = RunReport::load(&dir.path().join("report.json")).unwrap();
        assert_eq!(reloaded.canonical_json(), report.canonical_json());

        // Accept-rate series length equals the number of gate decisions.
        for (f, d) in report.folds.iter().zip(&report.decisions) {
            assert_eq!(f.series.accept_rate.len(), d.len());
        }

        // Summary is self-describing.
        let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
        assert!(summary.contains("epsilon"));
        assert!(summary.contains("reference_mode"));
        assert!(summary.contains("feature_k"));
    }

    #[test]
    fn text_only_uses_single_modality() {
        let mut cfg = quick_cfg(ModelVariant::TextOnly);
        cfg.feature_k = 4; // fewer than the text modality's 6 features
        let report = run_cv(&cfg).unwrap();
        assert_eq!(report.folds.len(), 4);
    }

    #[test]
    fn semisupervised_regime_runs_and_records_folds() {
        let mut cfg = quick_cfg(ModelVariant::Hio);
        cfg.n_pretrain_folds = Some(1);
        let report = run_cv(&cfg).unwrap();
        for f in &report.folds {
            assert_eq!(f.pretrain_folds.len(), 1);
            assert!(!f.pretrain_folds.contains(&f.fold));
            assert!(!f.pretrain_folds.contains(&f.validation_fold));
        }
    }

    #[test]
    fn majority_predictor_accuracy_equals_majority_frequency() {
        let ds = gen_synthetic(&SyntheticConfig {
            n_samples: 100,
            n_speakers: 20,
            modality_widths: vec![4],
            ..Default::default()
        })
        .unwrap();
        let freq = majority_class_frequency(&ds).unwrap();
        // A degenerate always-majority predictor scores exactly the majority
        // frequency on the full set.
        let labels: Vec<usize> = ds
            .samples()
            .iter()
            .map(|s| s.label(TRAIT_PERSUASION).unwrap().index())
            .collect();
        let mut counts = [0usize; 3];
        for &l in &labels {
            counts[l] += 1;
        }
        let majority = (0..3).max_by_key(|&i| counts[i]).unwrap();
        let preds = vec![majority; labels.len()];
        let (_, acc) = confusion_and_accuracy(&preds, &labels);
        assert_eq!(acc, freq);
    }
}
