//! Preprocessing pipeline: temporal pooling of frame-level descriptors,
//! TF-IDF text vectors, Welch t-test feature selection, and ternary Likert
//! labeling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum FeatureError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("frame width mismatch: expected {expected}, got {actual}")]
    FrameWidth { expected: usize, actual: usize },
    #[error("rating {0} outside [1, 7]")]
    RatingOutOfRange(f64),
    #[error("degenerate grouping: class {0:?} has fewer than 2 samples")]
    DegenerateGroup(TernaryClass),
    #[error("feature matrix is ragged at row {0}")]
    RaggedMatrix(usize),
    #[error("k must be positive")]
    ZeroK,
}

pub type Result<T> = std::result::Result<T, FeatureError>;

/// Ternary class derived from an averaged 1-7 Likert rating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TernaryClass {
    Negative,
    Neutral,
    Positive,
}

impl TernaryClass {
    pub fn index(self) -> usize {
        match self {
            TernaryClass::Negative => 0,
            TernaryClass::Neutral => 1,
            TernaryClass::Positive => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<TernaryClass> {
        match i {
            0 => Some(TernaryClass::Negative),
            1 => Some(TernaryClass::Neutral),
            2 => Some(TernaryClass::Positive),
            _ => None,
        }
    }
}

pub const N_CLASSES: usize = 3;

/// Thresholds an averaged rating: < 3 negative, in [3, 5] neutral, > 5
/// positive.
pub fn ternary_label(avg_rating: f64) -> Result<TernaryClass> {
    if !(1.0..=7.0).contains(&avg_rating) {
        return Err(FeatureError::RatingOutOfRange(avg_rating));
    }
    Ok(if avg_rating < 3.0 {
        TernaryClass::Negative
    } else if avg_rating <= 5.0 {
        TernaryClass::Neutral
    } else {
        TernaryClass::Positive
    })
}

/// An ordered list of fixed-width per-time-unit descriptor vectors.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    frames: Vec<Vec<f64>>,
    width: usize,
}

impl FrameSequence {
    pub fn new(frames: Vec<Vec<f64>>) -> Result<FrameSequence> {
        let width = frames
            .first()
            .ok_or(FeatureError::EmptyInput("frame sequence"))?
            .len();
        for f in &frames {
            if f.len() != width {
                return Err(FeatureError::FrameWidth {
                    expected: width,
                    actual: f.len(),
                });
            }
        }
        Ok(FrameSequence { frames, width })
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// Pools a frame sequence into a fixed-size vector: per dimension, (mean,
/// population std, min, max, max - min), concatenated dimension-major.
pub fn pool_temporal(seq: &FrameSequence) -> Vec<f64> {
    let n = seq.frames.len() as f64;
    let mut out = Vec::with_capacity(5 * seq.width);
    for d in 0..seq.width {
        let col = seq.frames.iter().map(|f| f[d]);
        let mean = col.clone().sum::<f64>() / n;
        let var = col.clone().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let min = col.clone().fold(f64::INFINITY, f64::min);
        let max = col.fold(f64::NEG_INFINITY, f64::max);
        out.extend_from_slice(&[mean, var.sqrt(), min, max, max - min]);
    }
    out
}

/// Whitespace tokenizer: lowercases and strips anything that is not
/// alphanumeric before splitting.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Immutable TF-IDF vocabulary fitted on a corpus. Terms are ordered
/// lexicographically so vector layout is deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TfidfVocabulary {
    terms: Vec<String>,
    doc_freq: Vec<usize>,
    n_docs: usize,
}

impl TfidfVocabulary {
    pub fn fit(corpus: &[Vec<String>]) -> Result<TfidfVocabulary> {
        if corpus.is_empty() {
            return Err(FeatureError::EmptyInput("tf-idf corpus"));
        }
        let mut df = std::collections::BTreeMap::<String, usize>::new();
        for doc in corpus {
            let unique: std::collections::BTreeSet<&String> = doc.iter().collect();
            for term in unique {
                *df.entry(term.clone()).or_insert(0) += 1;
            }
        }
        let (terms, doc_freq): (Vec<_>, Vec<_>) = df.into_iter().unzip();
        Ok(TfidfVocabulary {
            terms,
            doc_freq,
            n_docs: corpus.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    /// Entry for term t = raw count in doc x (ln(N / df) + 1). Terms not in
    /// the vocabulary contribute nothing.
    pub fn transform(&self, doc: &[String]) -> Vec<f64> {
        let mut counts = vec![0usize; self.terms.len()];
        for token in doc {
            if let Ok(i) = self.terms.binary_search(token) {
                counts[i] += 1;
            }
        }
        counts
            .iter()
            .zip(&self.doc_freq)
            .map(|(&tf, &df)| {
                if tf == 0 {
                    0.0
                } else {
                    tf as f64 * ((self.n_docs as f64 / df as f64).ln() + 1.0)
                }
            })
            .collect()
    }
}

/// Which class grouping drives the t-test ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TtestGrouping {
    /// Positive vs. negative samples; neutral excluded.
    #[default]
    TopVsBottom,
    /// Positive vs. everything else.
    OneVsRest,
}

/// Ranked outcome of t-test feature selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Selected feature indices, ordered by ascending p-value then index.
    pub selected_indices: Vec<usize>,
    pub t_statistics: Vec<f64>,
    pub p_values: Vec<f64>,
}

const VARIANCE_FLOOR: f64 = 1e-12;

/// Welch two-sample t statistic, Welch-Satterthwaite degrees of freedom, and
/// two-sided p-value. Sample variances are floored at 1e-12.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let (ma, va) = mean_sample_var(a);
    let (mb, vb) = mean_sample_var(b);
    let va = va.max(VARIANCE_FLOOR);
    let vb = vb.max(VARIANCE_FLOOR);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let p = if t == 0.0 {
        1.0
    } else {
        student_t_two_sided_p(t, df)
    };
    (t, df, p)
}

fn mean_sample_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() < 2 {
        0.0
    } else {
        xs.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    };
    (mean, var)
}

/// Two-sided tail probability of Student's t with `df` degrees of freedom,
/// via the regularized incomplete beta function: P = I_x(df/2, 1/2) with
/// x = df / (df + t^2).
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    regularized_incomplete_beta(0.5 * df, 0.5, x).clamp(0.0, 1.0)
}

/// Regularized incomplete beta I_x(a, b), evaluated with the standard
/// continued-fraction expansion (modified Lentz iteration).
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // Use the symmetry relation so the continued fraction converges quickly.
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_gamma_front(b, a, 1.0 - x) * beta_cf(b, a, 1.0 - x) / b
    }
}

fn ln_gamma_front(a: f64, b: f64, x: f64) -> f64 {
    (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp()
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation of ln Gamma(x) for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    let mut y = y;
    for c in COEF {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

/// Welch t-test feature ranking. Scores every feature between the two groups
/// chosen by `grouping` and returns the `min(k, n_features)` smallest
/// p-values, ties broken by ascending feature index.
pub fn ttest_select(
    features: &[Vec<f64>],
    labels: &[TernaryClass],
    k: usize,
    grouping: TtestGrouping,
) -> Result<SelectionResult> {
    if k == 0 {
        return Err(FeatureError::ZeroK);
    }
    if features.is_empty() {
        return Err(FeatureError::EmptyInput("feature matrix"));
    }
    let n_features = features[0].len();
    for (i, row) in features.iter().enumerate() {
        if row.len() != n_features {
            return Err(FeatureError::RaggedMatrix(i));
        }
    }
    let in_group_a = |c: TernaryClass| c == TernaryClass::Positive;
    let in_group_b = |c: TernaryClass| match grouping {
        TtestGrouping::TopVsBottom => c == TernaryClass::Negative,
        TtestGrouping::OneVsRest => c != TernaryClass::Positive,
    };
    let idx_a: Vec<usize> = (0..labels.len()).filter(|&i| in_group_a(labels[i])).collect();
    let idx_b: Vec<usize> = (0..labels.len()).filter(|&i| in_group_b(labels[i])).collect();
    if idx_a.len() < 2 {
        return Err(FeatureError::DegenerateGroup(TernaryClass::Positive));
    }
    if idx_b.len() < 2 {
        return Err(FeatureError::DegenerateGroup(TernaryClass::Negative));
    }

    let mut t_statistics = Vec::with_capacity(n_features);
    let mut p_values = Vec::with_capacity(n_features);
    for f in 0..n_features {
        let a: Vec<f64> = idx_a.iter().map(|&i| features[i][f]).collect();
        let b: Vec<f64> = idx_b.iter().map(|&i| features[i][f]).collect();
        let (t, _, p) = welch_t_test(&a, &b);
        t_statistics.push(t);
        p_values.push(p);
    }

    let mut order: Vec<usize> = (0..n_features).collect();
    order.sort_by(|&i, &j| {
        p_values[i]
            .partial_cmp(&p_values[j])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    order.truncate(k.min(n_features));
    Ok(SelectionResult {
        selected_indices: order,
        t_statistics,
        p_values,
    })
}

/// Projects a feature vector onto the selected indices, in selection order.
pub fn apply_selection(selection: &SelectionResult, row: &[f64]) -> Vec<f64> {
    selection.selected_indices.iter().map(|&i| row[i]).collect()
}
