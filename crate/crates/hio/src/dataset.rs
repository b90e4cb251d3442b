//! Dataset schema, JSON-lines loading, speaker-independent fold
//! construction, the reduced-pretraining (semi-supervised) regime, and a
//! planted-structure synthetic generator.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{ternary_label, TernaryClass};

pub const TRAIT_PASSION: &str = "passion";
pub const TRAIT_CREDIBILITY: &str = "credibility";
pub const TRAIT_PERSUASION: &str = "persuasion";
pub const REQUIRED_TRAITS: [&str; 3] = [TRAIT_PASSION, TRAIT_CREDIBILITY, TRAIT_PERSUASION];

#[derive(Error, Debug)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("sample {sample_id}: rating {rating} for trait {trait_name} outside [1, 7]")]
    RatingOutOfRange {
        sample_id: String,
        trait_name: String,
        rating: f64,
    },
    #[error("sample {sample_id}: missing required trait {trait_name}")]
    MissingTrait {
        sample_id: String,
        trait_name: String,
    },
    #[error("sample {sample_id}: modality {modality} has width {actual}, expected {expected}")]
    InconsistentWidth {
        sample_id: String,
        modality: String,
        expected: usize,
        actual: usize,
    },
    #[error("sample {sample_id}: modality set differs from the first sample")]
    InconsistentModalities { sample_id: String },
    #[error("duplicate sample id {0}")]
    DuplicateSampleId(String),
    #[error("dataset is empty")]
    Empty,
    #[error("cannot split {speakers} speakers into {folds} folds")]
    TooFewSpeakers { speakers: usize, folds: usize },
    #[error("pretraining wants {requested} folds but only {available} training folds exist")]
    PretrainTooLarge { requested: usize, available: usize },
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("generated persuasion class {0:?} has support below 5%")]
    DegenerateClassBalance(TernaryClass),
    #[error("unknown modality {0}")]
    UnknownModality(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// One annotated sample: per-modality feature vectors plus averaged 1-7
/// trait ratings. Class labels are always derived from the ratings via
/// [`ternary_label`], never stored independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub speaker_id: String,
    pub modality_features: BTreeMap<String, Vec<f64>>,
    pub trait_ratings: BTreeMap<String, f64>,
}

impl Sample {
    pub fn label(&self, trait_name: &str) -> Result<TernaryClass> {
        let rating = *self
            .trait_ratings
            .get(trait_name)
            .ok_or_else(|| DatasetError::MissingTrait {
                sample_id: self.sample_id.clone(),
                trait_name: trait_name.to_string(),
            })?;
        ternary_label(rating).map_err(|_| DatasetError::RatingOutOfRange {
            sample_id: self.sample_id.clone(),
            trait_name: trait_name.to_string(),
            rating,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    modality_widths: BTreeMap<String, usize>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Dataset> {
        let first = samples.first().ok_or(DatasetError::Empty)?;
        let modality_widths: BTreeMap<String, usize> = first
            .modality_features
            .iter()
            .map(|(k, v)| (k.clone(), v.len()))
            .collect();
        let mut seen = BTreeSet::new();
        for s in &samples {
            if !seen.insert(&s.sample_id) {
                return Err(DatasetError::DuplicateSampleId(s.sample_id.clone()));
            }
            let names: BTreeSet<&String> = s.modality_features.keys().collect();
            let expected_names: BTreeSet<&String> = modality_widths.keys().collect();
            if names != expected_names {
                return Err(DatasetError::InconsistentModalities {
                    sample_id: s.sample_id.clone(),
                });
            }
            for (m, v) in &s.modality_features {
                let expected = modality_widths[m];
                if v.len() != expected {
                    return Err(DatasetError::InconsistentWidth {
                        sample_id: s.sample_id.clone(),
                        modality: m.clone(),
                        expected,
                        actual: v.len(),
                    });
                }
            }
            for t in REQUIRED_TRAITS {
                s.label(t)?; // validates presence and range
            }
        }
        Ok(Dataset {
            samples,
            modality_widths,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn modality_widths(&self) -> &BTreeMap<String, usize> {
        &self.modality_widths
    }

    pub fn modality_names(&self) -> Vec<String> {
        self.modality_widths.keys().cloned().collect()
    }

    pub fn speakers(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.samples.iter().map(|s| &s.speaker_id).collect();
        set.into_iter().cloned().collect()
    }

    /// Restricts every sample to the named modalities (for unimodal runs).
    pub fn restrict_modalities(&self, keep: &[String]) -> Result<Dataset> {
        for m in keep {
            if !self.modality_widths.contains_key(m) {
                return Err(DatasetError::UnknownModality(m.clone()));
            }
        }
        let keep: BTreeSet<&String> = keep.iter().collect();
        let samples = self
            .samples
            .iter()
            .map(|s| Sample {
                modality_features: s
                    .modality_features
                    .iter()
                    .filter(|(k, _)| keep.contains(k))
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect(),
                ..s.clone()
            })
            .collect();
        Dataset::new(samples)
    }

    /// Concatenation of all modality vectors in lexicographic modality order.
    pub fn fused_features(&self, sample: &Sample) -> Vec<f64> {
        let mut out = Vec::new();
        for name in self.modality_widths.keys() {
            out.extend_from_slice(&sample.modality_features[name]);
        }
        out
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let file = std::fs::File::open(path).map_err(|e| DatasetError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let reader = std::io::BufReader::new(file);
        let mut samples = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| DatasetError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let sample: Sample = serde_json::from_str(&line)
                .map_err(|e| DatasetError::Parse { line: i + 1, source: e })?;
            samples.push(sample);
        }
        Dataset::new(samples)
    }

    /// Writes one JSON record per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io_err = |e| DatasetError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        for s in &self.samples {
            let line = serde_json::to_string(s).expect("sample serializes");
            writeln!(file, "{line}").map_err(io_err)?;
        }
        file.flush().map_err(io_err)?;
        Ok(())
    }
}

/// Speaker-disjoint fold assignment: every sample of a speaker lands in
/// exactly one fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    /// sample_id -> fold index
    pub assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, sample_id: &str) -> Option<usize> {
        self.assignment.get(sample_id).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_folds];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("plan serializes");
        std::fs::write(path, text).map_err(|e| DatasetError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<FoldPlan> {
        let text = std::fs::read_to_string(path).map_err(|e| DatasetError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| DatasetError::Parse { line: 0, source: e })
    }
}

/// Shuffles speakers by seed, then assigns each greedily to the fold with the
/// fewest samples so far.
pub fn split_folds(dataset: &Dataset, n_folds: usize, seed: u64) -> Result<FoldPlan> {
    let mut per_speaker: BTreeMap<&String, Vec<&String>> = BTreeMap::new();
    for s in dataset.samples() {
        per_speaker.entry(&s.speaker_id).or_default().push(&s.sample_id);
    }
    if per_speaker.len() < n_folds {
        return Err(DatasetError::TooFewSpeakers {
            speakers: per_speaker.len(),
            folds: n_folds,
        });
    }
    let mut speakers: Vec<&String> = per_speaker.keys().copied().collect();
    speakers.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut sizes = vec![0usize; n_folds];
    let mut assignment = BTreeMap::new();
    for spk in speakers {
        let target = (0..n_folds).min_by_key(|&f| (sizes[f], f)).unwrap();
        let ids = &per_speaker[spk];
        sizes[target] += ids.len();
        for id in ids {
            assignment.insert((*id).clone(), target);
        }
    }
    Ok(FoldPlan { n_folds, assignment })
}

/// Picks the training folds used for intermediate-network pretraining in the
/// reduced-supervision regime. Test and validation folds are excluded;
/// `n_pretrain_folds` up to `n_folds - 2` reproduces full supervision.
pub fn semisupervised_plan(
    plan: &FoldPlan,
    n_pretrain_folds: usize,
    test_fold: usize,
    validation_fold: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut training: Vec<usize> = (0..plan.n_folds)
        .filter(|&f| f != test_fold && f != validation_fold)
        .collect();
    if n_pretrain_folds > training.len() {
        return Err(DatasetError::PretrainTooLarge {
            requested: n_pretrain_folds,
            available: training.len(),
        });
    }
    training.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen: Vec<usize> = training.into_iter().take(n_pretrain_folds).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Configuration of the planted-structure generator. Latent passion and
/// credibility scores are noisy linear functions of disjoint feature subsets;
/// the latent persuasion score combines the two plus a noise-scaled direct
/// feature term, so at `noise_level` 0 persuasion is an exact function of the
/// two intermediate latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub n_speakers: usize,
    pub modality_widths: Vec<usize>,
    pub noise_level: f64,
    pub corr_passion: f64,
    pub corr_credibility: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_samples: 1000,
            n_speakers: 100,
            modality_widths: vec![20, 20, 20],
            noise_level: 0.3,
            corr_passion: 0.55,
            corr_credibility: 0.73,
            seed: 42,
        }
    }
}

/// Noise level at which the residual weights are calibrated so the rating
/// correlations land exactly on the configured targets.
const NOISE_REFERENCE: f64 = 0.3;
/// Per-speaker, per-trait offset scale as a multiple of noise_level.
const SPEAKER_EFFECT_PER_NOISE: f64 = 0.5;

fn modality_name(i: usize, total: usize) -> String {
    if total <= 3 {
        ["acoustic", "visual", "text"][i].to_string()
    } else {
        format!("m{i:02}")
    }
}

pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.n_samples == 0 || cfg.n_speakers == 0 {
        return Err(DatasetError::InvalidConfig("need samples and speakers".into()));
    }
    if cfg.n_speakers > cfg.n_samples {
        return Err(DatasetError::InvalidConfig(
            "more speakers than samples".into(),
        ));
    }
    if cfg.modality_widths.is_empty() || cfg.modality_widths.iter().any(|&w| w == 0) {
        return Err(DatasetError::InvalidConfig(
            "modality widths must be positive".into(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.noise_level) {
        return Err(DatasetError::InvalidConfig("noise_level outside [0,1]".into()));
    }
    for &c in [cfg.corr_passion, cfg.corr_credibility].iter() {
        if !(-1.0..=1.0).contains(&c) {
            return Err(DatasetError::InvalidConfig("correlation outside [-1,1]".into()));
        }
    }
    if cfg.corr_passion.powi(2) + cfg.corr_credibility.powi(2) > 1.0 {
        return Err(DatasetError::InvalidConfig(
            "correlation targets imply variance above 1".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total_width: usize = cfg.modality_widths.iter().sum();
    let n_modalities = cfg.modality_widths.len();

    // Disjoint thirds of the fused feature index space drive the latents:
    // within each modality, the first third feeds passion, the second
    // credibility, the last the direct persuasion term.
    let mut passion_idx = Vec::new();
    let mut cred_idx = Vec::new();
    let mut direct_idx = Vec::new();
    let mut offset = 0;
    for &w in &cfg.modality_widths {
        let a = (w / 3).max(1).min(w);
        let b = (2 * w / 3).max(a).min(w);
        passion_idx.extend(offset..offset + a);
        cred_idx.extend(offset + a..offset + b);
        direct_idx.extend(offset + b..offset + w);
        offset += w;
    }

    let unit_weights = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        let mut w: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        for v in &mut w {
            *v /= norm;
        }
        w
    };
    let w_passion = unit_weights(&mut rng, passion_idx.len());
    let w_cred = unit_weights(&mut rng, cred_idx.len());
    let w_direct = unit_weights(&mut rng, direct_idx.len().max(1));

    // Per-speaker, per-trait offsets (speaker effects without cross-trait
    // correlation inflation).
    let speaker_sigma = SPEAKER_EFFECT_PER_NOISE * cfg.noise_level;
    let speaker_offsets: Vec<[f64; 3]> = (0..cfg.n_speakers)
        .map(|_| {
            [
                speaker_sigma * rng.sample::<f64, _>(StandardNormal),
                speaker_sigma * rng.sample::<f64, _>(StandardNormal),
                speaker_sigma * rng.sample::<f64, _>(StandardNormal),
            ]
        })
        .collect();

    let eta = cfg.noise_level;
    let signal = (1.0 - eta * eta).sqrt();
    let (a, b) = (cfg.corr_passion, cfg.corr_credibility);
    // Per-term residual weight: scales with noise so persuasion becomes an
    // exact function of the two latents at noise 0, and the two residual
    // terms together carry variance 1 - a^2 - b^2 at the reference noise.
    let residual = (eta / NOISE_REFERENCE) * ((1.0 - a * a - b * b) / 2.0).sqrt();

    let mut features = Vec::with_capacity(cfg.n_samples);
    let mut latents = Vec::with_capacity(cfg.n_samples); // (passion, cred, pers)
    for i in 0..cfg.n_samples {
        let speaker = i % cfg.n_speakers;
        let x: Vec<f64> = (0..total_width)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let dot = |idx: &[usize], w: &[f64]| -> f64 {
            idx.iter().zip(w).map(|(&j, &wj)| x[j] * wj).sum()
        };
        let u_p = dot(&passion_idx, &w_passion);
        let u_c = dot(&cred_idx, &w_cred);
        let u_d = dot(&direct_idx, &w_direct);
        let off = speaker_offsets[speaker];

        let z_p = signal * u_p + eta * rng.sample::<f64, _>(StandardNormal);
        let z_c = signal * u_c + eta * rng.sample::<f64, _>(StandardNormal);
        let z_pe = a * z_p
            + b * z_c
            + residual * (u_d + rng.sample::<f64, _>(StandardNormal));

        features.push(x);
        latents.push([z_p + off[0], z_c + off[1], z_pe + off[2], speaker as f64]);
    }

    // Affine rescale of each latent's empirical range onto [1, 7].
    let rating_of = |col: usize| -> Vec<f64> {
        let min = latents.iter().map(|l| l[col]).fold(f64::INFINITY, f64::min);
        let max = latents.iter().map(|l| l[col]).fold(f64::NEG_INFINITY, f64::max);
        let span = (max - min).max(1e-9);
        latents
            .iter()
            .map(|l| (1.0 + 6.0 * (l[col] - min) / span).clamp(1.0, 7.0))
            .collect()
    };
    let passion_ratings = rating_of(0);
    let cred_ratings = rating_of(1);
    let pers_ratings = rating_of(2);

    let mut samples = Vec::with_capacity(cfg.n_samples);
    for (i, x) in features.into_iter().enumerate() {
        let speaker = i % cfg.n_speakers;
        let mut modality_features = BTreeMap::new();
        let mut off = 0;
        for (m, &w) in cfg.modality_widths.iter().enumerate() {
            modality_features.insert(modality_name(m, n_modalities), x[off..off + w].to_vec());
            off += w;
        }
        let mut trait_ratings = BTreeMap::new();
        trait_ratings.insert(TRAIT_PASSION.to_string(), passion_ratings[i]);
        trait_ratings.insert(TRAIT_CREDIBILITY.to_string(), cred_ratings[i]);
        trait_ratings.insert(TRAIT_PERSUASION.to_string(), pers_ratings[i]);
        samples.push(Sample {
            sample_id: format!("s{i:05}"),
            speaker_id: format!("spk{speaker:04}"),
            modality_features,
            trait_ratings,
        });
    }
    let dataset = Dataset::new(samples)?;

    // No persuasion class may collapse below 5% support.
    let mut counts = [0usize; 3];
    for s in dataset.samples() {
        counts[s.label(TRAIT_PERSUASION).unwrap().index()] += 1;
    }
    for (i, &c) in counts.iter().enumerate() {
        if (c as f64) < 0.05 * cfg.n_samples as f64 {
            return Err(DatasetError::DegenerateClassBalance(
                TernaryClass::from_index(i).unwrap(),
            ));
        }
    }
    Ok(dataset)
}

/// Pearson correlation between two equally long series.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx).powi(2);
        vy += (y - my).powi(2);
    }
    cov / (vx.sqrt() * vy.sqrt()).max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_dataset() -> Dataset {
        let mk = |id: &str, spk: &str, f: f64, r: f64| Sample {
            sample_id: id.to_string(),
            speaker_id: spk.to_string(),
            modality_features: BTreeMap::from([("acoustic".to_string(), vec![f, f + 1.0])]),
            trait_ratings: BTreeMap::from([
                (TRAIT_PASSION.to_string(), r),
                (TRAIT_CREDIBILITY.to_string(), r),
                (TRAIT_PERSUASION.to_string(), r),
            ]),
        };
        Dataset::new(vec![mk("a", "s1", 0.0, 2.0), mk("b", "s2", 1.0, 6.0)]).unwrap()
    }

    #[test]
    fn load_save_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let ds = tiny_dataset();
        ds.save(&path).unwrap();
        let loaded = Dataset::load(&path).unwrap();
        assert_eq!(loaded, ds);
    }

    #[test]
    fn rating_out_of_range_names_sample() {
        let ds = tiny_dataset();
        let mut samples = ds.samples.clone();
        samples[1]
            .trait_ratings
            .insert(TRAIT_PASSION.to_string(), 7.5);
        let err = Dataset::new(samples).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("b") && msg.contains("7.5"), "{msg}");
    }

    #[test]
    fn inconsistent_widths_rejected() {
        let ds = tiny_dataset();
        let mut samples = ds.samples.clone();
        samples[1]
            .modality_features
            .insert("acoustic".to_string(), vec![1.0]);
        assert!(matches!(
            Dataset::new(samples),
            Err(DatasetError::InconsistentWidth { .. })
        ));
    }

    #[test]
    fn missing_trait_rejected() {
        let ds = tiny_dataset();
        let mut samples = ds.samples.clone();
        samples[0].trait_ratings.remove(TRAIT_CREDIBILITY);
        assert!(matches!(
            Dataset::new(samples),
            Err(DatasetError::MissingTrait { .. })
        ));
    }

    #[test]
    fn one_speaker_per_fold_when_counts_match() {
        let cfg = SyntheticConfig {
            n_samples: 30,
            n_speakers: 10,
            modality_widths: vec![4],
            ..Default::default()
        };
        let ds = gen_synthetic(&cfg).unwrap();
        let plan = split_folds(&ds, 10, 7).unwrap();
        // 10 speakers into 10 folds: exactly one speaker each.
        let mut speakers_per_fold = vec![BTreeSet::new(); 10];
        for s in ds.samples() {
            speakers_per_fold[plan.fold_of(&s.sample_id).unwrap()].insert(&s.speaker_id);
        }
        assert!(speakers_per_fold.iter().all(|s| s.len() == 1));
    }

    #[test]
    fn split_rejects_too_few_speakers() {
        let ds = tiny_dataset();
        assert!(split_folds(&ds, 3, 0).is_err());
    }

    #[test]
    fn greedy_fold_sizes_near_balanced() {
        let ds = gen_synthetic(&SyntheticConfig::default()).unwrap();
        let plan = split_folds(&ds, 10, 42).unwrap();
        let sizes = plan.fold_sizes();
        assert_eq!(sizes.iter().sum::<usize>(), 1000);
        // Max per-speaker sample count is 10 (1000 samples round-robin over
        // 100 speakers), so greedy balance keeps folds within 100 +- 10.
        for &s in &sizes {
            assert!((90..=110).contains(&s), "sizes {sizes:?}");
        }
    }

    #[test]
    fn semisupervised_subset_excludes_test_and_validation() {
        let ds = gen_synthetic(&SyntheticConfig::default()).unwrap();
        let plan = split_folds(&ds, 10, 1).unwrap();
        let subset = semisupervised_plan(&plan, 2, 0, 1, 5).unwrap();
        assert_eq!(subset.len(), 2);
        assert!(!subset.contains(&0) && !subset.contains(&1));

        let full = semisupervised_plan(&plan, 8, 0, 1, 5).unwrap();
        assert_eq!(full.len(), 8);
        assert!(semisupervised_plan(&plan, 9, 0, 1, 5).is_err());
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SyntheticConfig {
            n_samples: 50,
            n_speakers: 10,
            modality_widths: vec![6, 6],
            ..Default::default()
        };
        assert_eq!(gen_synthetic(&cfg).unwrap(), gen_synthetic(&cfg).unwrap());
    }

    /// Exact least-squares fit of y on two predictors plus an intercept.
    fn fit_plane(p: &[f64], c: &[f64], y: &[f64]) -> (f64, f64, f64) {
        // Normal equations for [1 p c] beta = y, solved by Gaussian
        // elimination on the 3x3 system.
        let n = p.len() as f64;
        let s = |v: &[f64]| v.iter().sum::<f64>();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut m = [
            [n, s(p), s(c), s(y)],
            [s(p), dot(p, p), dot(p, c), dot(p, y)],
            [s(c), dot(p, c), dot(c, c), dot(c, y)],
        ];
        for i in 0..3 {
            let piv = m[i][i];
            for j in i..4 {
                m[i][j] /= piv;
            }
            for r in 0..3 {
                if r != i {
                    let f = m[r][i];
                    for j in i..4 {
                        m[r][j] -= f * m[i][j];
                    }
                }
            }
        }
        (m[0][3], m[1][3], m[2][3])
    }

    #[test]
    fn zero_noise_persuasion_is_function_of_latents() {
        // At noise 0 the persuasion latent is a * z_p + b * z_c exactly and
        // speaker offsets vanish, so the persuasion rating is an exact linear
        // function of the passion and credibility ratings. An oracle that
        // fits that plane and thresholds the result classifies perfectly.
        let cfg = SyntheticConfig {
            n_samples: 200,
            n_speakers: 20,
            noise_level: 0.0,
            ..Default::default()
        };
        let ds = gen_synthetic(&cfg).unwrap();
        let p: Vec<f64> = ds.samples().iter().map(|s| s.trait_ratings[TRAIT_PASSION]).collect();
        let c: Vec<f64> = ds
            .samples()
            .iter()
            .map(|s| s.trait_ratings[TRAIT_CREDIBILITY])
            .collect();
        let pe: Vec<f64> = ds
            .samples()
            .iter()
            .map(|s| s.trait_ratings[TRAIT_PERSUASION])
            .collect();
        let (b0, b1, b2) = fit_plane(&p, &c, &pe);
        let mut hits = 0;
        for (i, s) in ds.samples().iter().enumerate() {
            let predicted_rating = (b0 + b1 * p[i] + b2 * c[i]).clamp(1.0, 7.0);
            assert!((predicted_rating - pe[i]).abs() < 1e-6);
            if ternary_label(predicted_rating).unwrap() == s.label(TRAIT_PERSUASION).unwrap() {
                hits += 1;
            }
        }
        assert_eq!(hits, ds.len());
    }

    #[test]
    fn default_config_hits_correlation_targets() {
        let cfg = SyntheticConfig::default();
        let ds = gen_synthetic(&cfg).unwrap();
        let p: Vec<f64> = ds.samples().iter().map(|s| s.trait_ratings[TRAIT_PASSION]).collect();
        let c: Vec<f64> = ds
            .samples()
            .iter()
            .map(|s| s.trait_ratings[TRAIT_CREDIBILITY])
            .collect();
        let pe: Vec<f64> = ds
            .samples()
            .iter()
            .map(|s| s.trait_ratings[TRAIT_PERSUASION])
            .collect();
        let r_p = pearson(&p, &pe);
        let r_c = pearson(&c, &pe);
        assert!((r_p - cfg.corr_passion).abs() < 0.1, "passion corr {r_p}");
        assert!((r_c - cfg.corr_credibility).abs() < 0.1, "credibility corr {r_c}");
    }

    #[test]
    fn labels_derive_from_ratings() {
        let ds = gen_synthetic(&SyntheticConfig {
            n_samples: 100,
            n_speakers: 10,
            ..Default::default()
        })
        .unwrap();
        for s in ds.samples() {
            for t in REQUIRED_TRAITS {
                assert_eq!(
                    s.label(t).unwrap(),
                    ternary_label(s.trait_ratings[t]).unwrap()
                );
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]
        #[test]
        fn folds_are_speaker_disjoint(seed in 0u64..10_000, n_folds in 2usize..=10) {
            let ds = gen_synthetic(&SyntheticConfig {
                n_samples: 120,
                n_speakers: 30,
                modality_widths: vec![4],
                ..Default::default()
            }).unwrap();
            let plan = split_folds(&ds, n_folds, seed).unwrap();
            let mut speaker_fold: BTreeMap<&String, usize> = BTreeMap::new();
            for s in ds.samples() {
                let f = plan.fold_of(&s.sample_id).unwrap();
                if let Some(&prev) = speaker_fold.get(&s.speaker_id) {
                    prop_assert_eq!(prev, f);
                } else {
                    speaker_fold.insert(&s.speaker_id, f);
                }
            }
        }
    }
}
