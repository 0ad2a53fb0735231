//! Calibration metrics over pair-expanded predictions.
//!
//! Each `(annotation, sample)` pair is one evaluation unit: a sample with
//! `k_c` votes for class `c` contributes `k_c` pairs labelled `c`, all
//! sharing the sample's predicted probability vector.
//!
//! Binned metrics use `B` equal-width bins on `[0, 1]` whose edges are
//! `b / B`; bins are half-open `[lo, hi)` except the last, which is closed
//! at 1.0. Adaptive metrics sort each class's confidences ascending (stable
//! in pair order) and cut them by index into `R` ranges whose sizes differ
//! by at most one, larger ranges first.

use serde::{Deserialize, Serialize};

use crate::annotations::{unit_bin, AnnotationRecord};
use crate::{argmax, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub sample_id: String,
    pub label_class: usize,
    pub pred_probs: Vec<f64>,
}

impl PairSample {
    pub fn confidence(&self) -> f64 {
        self.pred_probs[self.predicted_class()]
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.pred_probs)
    }

    pub fn is_correct(&self) -> bool {
        self.predicted_class() == self.label_class
    }
}

/// Expand every vote into its own [`PairSample`]. Predictions and records
/// are joined on `sample_id`; output follows the prediction order, and
/// within a sample goes class by class.
pub fn expand_pairs(
    predictions: &[(String, Vec<f64>)],
    records: &[AnnotationRecord],
) -> Result<Vec<PairSample>> {
    let by_id: std::collections::HashMap<&str, &AnnotationRecord> =
        records.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    let mut pairs = Vec::new();
    for (id, probs) in predictions {
        let record = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::Join(format!("no annotations for sample `{id}`")))?;
        if record.counts.len() != probs.len() {
            return Err(Error::DimensionMismatch {
                expected: probs.len(),
                got: record.counts.len(),
            });
        }
        if record.total_votes() == 0 {
            return Err(Error::UnlabeledSample(id.clone()));
        }
        for (class, &k) in record.counts.iter().enumerate() {
            for _ in 0..k {
                pairs.push(PairSample {
                    sample_id: id.clone(),
                    label_class: class,
                    pred_probs: probs.clone(),
                });
            }
        }
    }
    Ok(pairs)
}

fn check_pairs(pairs: &[PairSample]) -> Result<usize> {
    let first = pairs.first().ok_or(Error::EmptyInput("pair list"))?;
    let classes = first.pred_probs.len();
    if classes == 0 {
        return Err(Error::InvalidInput("empty prediction vector".into()));
    }
    for p in pairs {
        if p.pred_probs.len() != classes {
            return Err(Error::DimensionMismatch {
                expected: classes,
                got: p.pred_probs.len(),
            });
        }
        if p.label_class >= classes {
            return Err(Error::InvalidInput(format!(
                "label class {} out of range for {classes} classes",
                p.label_class
            )));
        }
    }
    Ok(classes)
}

fn check_count(n: usize, what: &str) -> Result<()> {
    if n == 0 {
        Err(Error::InvalidInput(format!("{what} must be at least 1")))
    } else {
        Ok(())
    }
}

/// Multiclass Brier score: mean squared distance between the one-hot label
/// and the full predicted vector.
pub fn brier(pairs: &[PairSample]) -> Result<f64> {
    check_pairs(pairs)?;
    let total: f64 = pairs.iter().map(pair_brier).sum();
    Ok(total / pairs.len() as f64)
}

fn pair_brier(p: &PairSample) -> f64 {
    squared_distance_to_one_hot(&p.pred_probs, p.label_class)
}

fn squared_distance_to_one_hot(probs: &[f64], class: usize) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(c, &q)| {
            let y = if c == class { 1.0 } else { 0.0 };
            (y - q) * (y - q)
        })
        .sum()
}

/// Brier score straight from vote counts, without materialising pairs.
pub fn brier_from_counts(predictions: &[Vec<f64>], counts: &[Vec<u32>]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput("predictions"));
    }
    if predictions.len() != counts.len() {
        return Err(Error::DimensionMismatch {
            expected: predictions.len(),
            got: counts.len(),
        });
    }
    let n_pairs: u64 = counts.iter().flatten().map(|&k| u64::from(k)).sum();
    if n_pairs == 0 {
        return Err(Error::EmptyInput("vote counts"));
    }
    let mut total = 0.0;
    for (probs, k) in predictions.iter().zip(counts) {
        for (c, &votes) in k.iter().enumerate() {
            if votes > 0 {
                total += f64::from(votes) * squared_distance_to_one_hot(probs, c);
            }
        }
    }
    Ok(total / n_pairs as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Mean top-label confidence; 0 for an empty bin.
    pub avg_confidence: f64,
    /// Fraction of pairs whose argmax equals the label; 0 for an empty bin.
    pub accuracy: f64,
}

impl ReliabilityBin {
    pub fn gap(&self) -> f64 {
        (self.accuracy - self.avg_confidence).abs()
    }
}

/// Accumulates confidence sums and hits per equal-width bin.
struct BinAccumulator {
    count: Vec<usize>,
    conf_sum: Vec<f64>,
    hits: Vec<usize>,
}

impl BinAccumulator {
    fn new(bins: usize) -> Self {
        Self {
            count: vec![0; bins],
            conf_sum: vec![0.0; bins],
            hits: vec![0; bins],
        }
    }

    fn add(&mut self, confidence: f64, hit: bool) {
        let b = unit_bin(confidence.clamp(0.0, 1.0), self.count.len());
        self.count[b] += 1;
        self.conf_sum[b] += confidence;
        if hit {
            self.hits[b] += 1;
        }
    }

    fn bins(&self) -> Vec<ReliabilityBin> {
        let n_bins = self.count.len();
        (0..n_bins)
            .map(|b| {
                let n = self.count[b];
                let (avg_confidence, accuracy) = if n == 0 {
                    (0.0, 0.0)
                } else {
                    (self.conf_sum[b] / n as f64, self.hits[b] as f64 / n as f64)
                };
                ReliabilityBin {
                    lo: b as f64 / n_bins as f64,
                    hi: (b + 1) as f64 / n_bins as f64,
                    count: n,
                    avg_confidence,
                    accuracy,
                }
            })
            .collect()
    }
}

/// Weighted gap `sum_b (n_b / N) |acc_b - conf_b|` over populated bins.
fn weighted_gap(bins: &[ReliabilityBin], total: usize) -> f64 {
    bins.iter()
        .filter(|b| b.count > 0)
        .map(|b| (b.count as f64 / total as f64) * b.gap())
        .sum()
}

/// Top-label reliability diagram with `bins` equal-width bins.
pub fn reliability_diagram(pairs: &[PairSample], bins: usize) -> Result<Vec<ReliabilityBin>> {
    check_pairs(pairs)?;
    check_count(bins, "bin count")?;
    let mut acc = BinAccumulator::new(bins);
    for p in pairs {
        acc.add(p.confidence(), p.is_correct());
    }
    Ok(acc.bins())
}

pub fn ece(pairs: &[PairSample], bins: usize) -> Result<f64> {
    let diagram = reliability_diagram(pairs, bins)?;
    Ok(weighted_gap(&diagram, pairs.len()))
}

pub fn mce(pairs: &[PairSample], bins: usize) -> Result<f64> {
    let diagram = reliability_diagram(pairs, bins)?;
    Ok(max_gap(&diagram))
}

fn max_gap(bins: &[ReliabilityBin]) -> f64 {
    bins.iter()
        .filter(|b| b.count > 0)
        .map(ReliabilityBin::gap)
        .fold(0.0, f64::max)
}

/// Static calibration error: every class's probability is binned on its own
/// and scored against whether the pair's label is that class.
pub fn sce(pairs: &[PairSample], bins: usize) -> Result<f64> {
    let classes = check_pairs(pairs)?;
    check_count(bins, "bin count")?;
    let mut total = 0.0;
    for c in 0..classes {
        let mut acc = BinAccumulator::new(bins);
        for p in pairs {
            acc.add(p.pred_probs[c], p.label_class == c);
        }
        total += weighted_gap(&acc.bins(), pairs.len());
    }
    Ok(total / classes as f64)
}

/// Near-equal index ranges: the first `n % r` ranges get one extra element.
pub fn equal_count_ranges(n: usize, r: usize) -> Vec<std::ops::Range<usize>> {
    let base = n / r;
    let extra = n % r;
    let mut start = 0;
    (0..r)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let range = start..start + len;
            start += len;
            range
        })
        .collect()
}

/// Sum over ranges of `|acc - conf|` for one class's (confidence, hit)
/// values, already filtered.
fn adaptive_class_gap(mut values: Vec<(f64, bool)>, ranges: usize) -> f64 {
    // sort_by is stable, so ties keep pair order
    values.sort_by(|a, b| a.0.total_cmp(&b.0));
    equal_count_ranges(values.len(), ranges)
        .into_iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let slice = &values[r];
            let n = slice.len() as f64;
            let conf = slice.iter().map(|v| v.0).sum::<f64>() / n;
            let acc = slice.iter().filter(|v| v.1).count() as f64 / n;
            (acc - conf).abs()
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveError {
    pub value: f64,
    /// Classes with no confidence above the threshold; they contribute 0.
    pub empty_classes: Vec<usize>,
}

fn adaptive_error(
    pairs: &[PairSample],
    ranges: usize,
    threshold: Option<f64>,
) -> Result<AdaptiveError> {
    let classes = check_pairs(pairs)?;
    check_count(ranges, "range count")?;
    let mut total = 0.0;
    let mut empty_classes = Vec::new();
    for c in 0..classes {
        let values: Vec<(f64, bool)> = pairs
            .iter()
            .map(|p| (p.pred_probs[c], p.label_class == c))
            .filter(|v| threshold.is_none_or(|eps| v.0 > eps))
            .collect();
        if values.is_empty() {
            empty_classes.push(c);
            continue;
        }
        total += adaptive_class_gap(values, ranges);
    }
    Ok(AdaptiveError {
        value: total / (classes * ranges) as f64,
        empty_classes,
    })
}

/// Adaptive calibration error with `ranges` equal-count ranges per class.
pub fn ace(pairs: &[PairSample], ranges: usize) -> Result<f64> {
    Ok(adaptive_error(pairs, ranges, None)?.value)
}

/// Thresholded ACE: only confidences strictly above `epsilon` count.
pub fn tace(pairs: &[PairSample], ranges: usize, epsilon: f64) -> Result<AdaptiveError> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidInput(format!(
            "epsilon {epsilon} not in [0, 1)"
        )));
    }
    adaptive_error(pairs, ranges, Some(epsilon))
}

fn default_bins() -> usize {
    10
}
fn default_epsilon() -> f64 {
    0.01
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_bins")]
    pub ranges: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            bins: default_bins(),
            ranges: default_bins(),
            epsilon: default_epsilon(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bce: f64,
    pub ece: f64,
    pub mce: f64,
    pub sce: f64,
    pub ace: f64,
    pub tace: f64,
    pub n_pairs: usize,
    pub bins: Vec<ReliabilityBin>,
    pub tace_empty_classes: Vec<usize>,
    pub config: CalibrationConfig,
}

pub fn calibration_report(
    pairs: &[PairSample],
    config: &CalibrationConfig,
) -> Result<CalibrationReport> {
    let bins = reliability_diagram(pairs, config.bins)?;
    let tace = tace(pairs, config.ranges, config.epsilon)?;
    Ok(CalibrationReport {
        bce: brier(pairs)?,
        ece: weighted_gap(&bins, pairs.len()),
        mce: max_gap(&bins),
        sce: sce(pairs, config.bins)?,
        ace: ace(pairs, config.ranges)?,
        tace: tace.value,
        n_pairs: pairs.len(),
        bins,
        tace_empty_classes: tace.empty_classes,
        config: *config,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileBce {
    /// Upper percentile of the group, in (0, 100].
    pub percentile: f64,
    pub n_samples: usize,
    pub n_pairs: usize,
    pub bce: f64,
}

/// Brier score of each uncertainty quantile group.
///
/// Samples (each a group of pairs) are sorted by uncertainty ascending,
/// ties in sample order, then cut into `quantiles` equal-count groups.
pub fn bce_vs_uncertainty_percentile(
    samples: &[Vec<PairSample>],
    uncertainty: &[f64],
    quantiles: usize,
) -> Result<Vec<PercentileBce>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("samples"));
    }
    if uncertainty.len() != samples.len() {
        return Err(Error::DimensionMismatch {
            expected: samples.len(),
            got: uncertainty.len(),
        });
    }
    if quantiles < 2 {
        return Err(Error::InvalidInput(
            "need at least 2 quantile groups".into(),
        ));
    }
    if samples.len() < quantiles {
        return Err(Error::InvalidInput(format!(
            "{} samples cannot fill {quantiles} quantile groups",
            samples.len()
        )));
    }
    let order = sort_by_uncertainty(uncertainty)?;
    equal_count_ranges(order.len(), quantiles)
        .into_iter()
        .enumerate()
        .map(|(g, range)| {
            let group: Vec<PairSample> = order[range.clone()]
                .iter()
                .flat_map(|&i| samples[i].iter().cloned())
                .collect();
            Ok(PercentileBce {
                percentile: 100.0 * (g + 1) as f64 / quantiles as f64,
                n_samples: range.len(),
                n_pairs: group.len(),
                bce: brier(&group)?,
            })
        })
        .collect()
}

/// Indices sorted by value ascending; ties keep index order.
pub(crate) fn sort_by_uncertainty(values: &[f64]) -> Result<Vec<usize>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "uncertainty values must be finite".into(),
        ));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    Ok(order)
}
