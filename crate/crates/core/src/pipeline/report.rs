//! The analysis report: calibration, divergence, correlations, rejection
//! and extreme-ranking results for the evaluated models.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::config::{AnalysisConfig, EvalSplit, Mode, Model, ModelConfig, SplitConfig};
use super::io::table_csv;
use super::log::PredictionRecord;
use crate::annotations::AnnotationRecord;
use crate::annotations::{disagreement_histogram, DensityHistogram, LabelSchema, SoftLabel};
use crate::calibration::{
    bce_vs_uncertainty_percentile, calibration_report, expand_pairs, CalibrationReport,
    PercentileBce,
};
use crate::evaluation::{
    accuracy, jsd, paired_ttest, pearson, rank_extremes, rejection_curve, welch_ttest,
    CorrelationResult, RejectionCurve, TTestResult,
};
use crate::mlp::TrainConfig;
use crate::synth::SynthConfig;
use crate::uncertainty::{decompose, McPrediction, UncertaintyTriple};
use crate::{Error, Result};

/// Uncertainty kinds, in report order.
pub const KINDS: [&str; 3] = ["Ua", "Ue", "Ut"];

fn pick(t: &UncertaintyTriple, kind: &str) -> f64 {
    match kind {
        "Ua" => t.u_aleatoric,
        "Ue" => t.u_epistemic,
        _ => t.u_total,
    }
}

/// Everything in the run config that affects results (file paths excluded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub mode: Mode,
    pub schema: LabelSchema,
    pub synth: Option<SynthConfig>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub analysis: AnalysisConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub train: u64,
    pub synth: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub accuracy: f64,
    pub mean_jsd: f64,
    pub sd_jsd: f64,
    pub calibration: CalibrationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsdComparison {
    pub baseline_mean_jsd: f64,
    pub uncnet_mean_jsd: f64,
    pub ttest: Option<TTestResult>,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub model: Model,
    /// `all` or `low-<kind>` for uncertainty-ranked rejection.
    pub subset: String,
    pub coverage: f64,
    pub n_kept: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtremesBlock {
    pub lowest: Vec<String>,
    pub highest: Vec<String>,
    pub lowest_mean_disagreement: f64,
    pub highest_mean_disagreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySection {
    pub mean_u_total: f64,
    pub mean_u_aleatoric: f64,
    pub mean_u_epistemic: f64,
    /// Keys `Ux-d`, `Ux-JSD` (per sample) and `Ux-BCE` (over the
    /// percentile groups). `None` when the input was degenerate.
    pub correlations: BTreeMap<String, Option<CorrelationResult>>,
    pub bce_percentile: BTreeMap<String, Vec<PercentileBce>>,
    pub rejection: BTreeMap<String, RejectionCurve>,
    pub extremes: BTreeMap<String, ExtremesBlock>,
}

/// Shifted (out-of-distribution) samples versus the rest, when the data
/// came with a synth sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSection {
    pub n_shifted: usize,
    pub n_in_distribution: usize,
    pub mean_ue_shifted: f64,
    pub mean_ue_in_distribution: f64,
    pub mean_ua_shifted: f64,
    pub mean_ua_in_distribution: f64,
    pub mean_disagreement_shifted: f64,
    pub mean_disagreement_in_distribution: f64,
    /// Welch test of U_e, shifted minus in-distribution.
    pub ue_ttest: TTestResult,
    pub ue_p_greater: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub library_version: String,
    pub config: ReportConfig,
    pub seeds: Seeds,
    pub eval_split: EvalSplit,
    pub n_samples: usize,
    pub n_pairs: usize,
    pub mean_disagreement: f64,
    pub models: BTreeMap<Model, ModelSummary>,
    pub jsd_comparison: Option<JsdComparison>,
    pub accuracy_table: Vec<AccuracyRow>,
    pub disagreement_histogram: DensityHistogram,
    pub uncertainty: Option<UncertaintySection>,
    pub distribution_shift: Option<ShiftSection>,
    pub warnings: Vec<String>,
}

/// Inputs to [`analyze`], already joined and filtered to the evaluation set.
pub struct AnalysisInput<'a> {
    pub config: ReportConfig,
    pub seeds: Seeds,
    pub sample_ids: Vec<String>,
    pub records: Vec<AnnotationRecord>,
    pub labels: Vec<SoftLabel>,
    pub logs: BTreeMap<Model, Vec<&'a PredictionRecord>>,
    /// Shift flags by sample id, if known.
    pub shifted: Option<HashMap<String, bool>>,
    pub warnings: Vec<String>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn triple_of(r: &PredictionRecord) -> Result<UncertaintyTriple> {
    match r.uncertainty {
        Some(t) => Ok(t),
        None => Ok(decompose(&McPrediction::from_rows(
            r.sample_id.clone(),
            &r.probs,
        )?)),
    }
}

pub fn analyze(input: AnalysisInput<'_>) -> Result<AnalysisReport> {
    let AnalysisInput {
        config,
        seeds,
        sample_ids,
        records,
        labels,
        logs,
        shifted,
        mut warnings,
    } = input;
    let eval_split = config.split.eval;
    let n = sample_ids.len();
    if n == 0 {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let label_probs: Vec<Vec<f64>> = labels.iter().map(|l| l.probs.clone()).collect();
    let disagreements: Vec<f64> = labels.iter().map(|l| l.disagreement).collect();
    let analysis = &config.analysis;
    let cal_config = analysis.calibration();

    let mut models = BTreeMap::new();
    let mut jsds: BTreeMap<Model, Vec<f64>> = BTreeMap::new();
    let mut preds_by_model: BTreeMap<Model, Vec<Vec<f64>>> = BTreeMap::new();
    let mut n_pairs = 0;
    for (&model, log) in &logs {
        let preds: Vec<Vec<f64>> = log.iter().map(|r| r.mean_probs.clone()).collect();
        let keyed: Vec<(String, Vec<f64>)> = sample_ids
            .iter()
            .cloned()
            .zip(preds.iter().cloned())
            .collect();
        let pairs = expand_pairs(&keyed, &records)?;
        n_pairs = pairs.len();
        let calibration = calibration_report(&pairs, &cal_config)?;
        let per_sample_jsd = preds
            .iter()
            .zip(&label_probs)
            .map(|(p, y)| jsd(p, y))
            .collect::<Result<Vec<_>>>()?;
        let (mean_jsd, sd_jsd) = mean_sd(&per_sample_jsd);
        models.insert(
            model,
            ModelSummary {
                accuracy: accuracy(&preds, &label_probs)?,
                mean_jsd,
                sd_jsd,
                calibration,
            },
        );
        jsds.insert(model, per_sample_jsd);
        preds_by_model.insert(model, preds);
    }

    let jsd_comparison = match (jsds.get(&Model::Baseline), jsds.get(&Model::Uncnet)) {
        (Some(b), Some(u)) => {
            let (ttest, warning) = match paired_ttest(b, u) {
                Ok(t) => (Some(t), None),
                Err(e) => (None, Some(e.to_string())),
            };
            if let Some(w) = &warning {
                warnings.push(format!("JSD paired t-test skipped: {w}"));
            }
            Some(JsdComparison {
                baseline_mean_jsd: mean(b),
                uncnet_mean_jsd: mean(u),
                ttest,
                warning,
            })
        }
        _ => None,
    };

    let mut accuracy_table = Vec::new();
    for (&model, summary) in &models {
        accuracy_table.push(AccuracyRow {
            model,
            subset: "all".into(),
            coverage: 1.0,
            n_kept: n,
            accuracy: summary.accuracy,
        });
    }

    let mut uncertainty = None;
    let mut distribution_shift = None;
    if let Some(log) = logs.get(&Model::Uncnet) {
        let triples = log
            .iter()
            .map(|r| triple_of(r))
            .collect::<Result<Vec<_>>>()?;
        let preds = &preds_by_model[&Model::Uncnet];
        let uncnet_jsd = &jsds[&Model::Uncnet];
        let per_sample_pairs = sample_ids
            .iter()
            .zip(preds)
            .zip(&records)
            .map(|((id, p), r)| expand_pairs(&[(id.clone(), p.clone())], std::slice::from_ref(r)))
            .collect::<Result<Vec<_>>>()?;

        let mut correlations = BTreeMap::new();
        let mut bce_percentile = BTreeMap::new();
        let mut rejection = BTreeMap::new();
        let mut extremes = BTreeMap::new();
        let mut correlate = |name: String, x: &[f64], y: &[f64], warnings: &mut Vec<String>| {
            let r = match pearson(x, y) {
                Ok(r) => Some(r),
                Err(e) => {
                    warnings.push(format!("correlation {name} skipped: {e}"));
                    None
                }
            };
            correlations.insert(name, r);
        };
        let d_mean = |ids: &[String]| -> f64 {
            let idx: HashMap<&str, usize> = sample_ids
                .iter()
                .enumerate()
                .map(|(i, s)| (s.as_str(), i))
                .collect();
            mean(
                &ids.iter()
                    .map(|s| disagreements[idx[s.as_str()]])
                    .collect::<Vec<_>>(),
            )
        };
        let k = analysis.k_extremes.min(n);
        for kind in KINDS {
            let u: Vec<f64> = triples.iter().map(|t| pick(t, kind)).collect();
            correlate(format!("{kind}-d"), &u, &disagreements, &mut warnings);
            correlate(format!("{kind}-JSD"), &u, uncnet_jsd, &mut warnings);

            if n >= analysis.quantiles {
                let curve =
                    bce_vs_uncertainty_percentile(&per_sample_pairs, &u, analysis.quantiles)?;
                let pct: Vec<f64> = curve.iter().map(|c| c.percentile).collect();
                let bce: Vec<f64> = curve.iter().map(|c| c.bce).collect();
                correlate(format!("{kind}-BCE"), &pct, &bce, &mut warnings);
                bce_percentile.insert(kind.to_string(), curve);
            } else {
                warnings.push(format!(
                    "BCE percentile curve for {kind} skipped: {n} samples < {} groups",
                    analysis.quantiles
                ));
            }

            let curve = rejection_curve(preds, &label_probs, &u, &analysis.coverages)?;
            for p in &curve.points {
                accuracy_table.push(AccuracyRow {
                    model: Model::Uncnet,
                    subset: format!("low-{kind}"),
                    coverage: p.coverage,
                    n_kept: p.n_kept,
                    accuracy: p.accuracy,
                });
            }
            rejection.insert(kind.to_string(), curve);

            let ex = rank_extremes(&sample_ids, &u, k)?;
            extremes.insert(
                kind.to_string(),
                ExtremesBlock {
                    lowest_mean_disagreement: if k > 0 { d_mean(&ex.lowest) } else { 0.0 },
                    highest_mean_disagreement: if k > 0 { d_mean(&ex.highest) } else { 0.0 },
                    lowest: ex.lowest,
                    highest: ex.highest,
                },
            );
        }
        let means =
            |f: fn(&UncertaintyTriple) -> f64| mean(&triples.iter().map(f).collect::<Vec<_>>());
        uncertainty = Some(UncertaintySection {
            mean_u_total: means(|t| t.u_total),
            mean_u_aleatoric: means(|t| t.u_aleatoric),
            mean_u_epistemic: means(|t| t.u_epistemic),
            correlations,
            bce_percentile,
            rejection,
            extremes,
        });

        if let Some(flags) = &shifted {
            distribution_shift =
                shift_section(&sample_ids, flags, &triples, &disagreements, &mut warnings)?;
        }
    }

    let disagreement_histogram = disagreement_histogram(&disagreements, analysis.histogram_bins)?;
    Ok(AnalysisReport {
        library_version: super::LIBRARY_VERSION.to_string(),
        config,
        seeds,
        eval_split,
        n_samples: n,
        n_pairs,
        mean_disagreement: mean(&disagreements),
        models,
        jsd_comparison,
        accuracy_table,
        disagreement_histogram,
        uncertainty,
        distribution_shift,
        warnings,
    })
}

fn shift_section(
    ids: &[String],
    flags: &HashMap<String, bool>,
    triples: &[UncertaintyTriple],
    disagreements: &[f64],
    warnings: &mut Vec<String>,
) -> Result<Option<ShiftSection>> {
    let (mut ue, mut ua, mut d) = ([vec![], vec![]], [vec![], vec![]], [vec![], vec![]]);
    for ((id, t), &di) in ids.iter().zip(triples).zip(disagreements) {
        let Some(&is_shifted) = flags.get(id) else {
            return Err(Error::Join(format!(
                "sample `{id}` missing from the synth sidecar"
            )));
        };
        let g = usize::from(is_shifted);
        ue[g].push(t.u_epistemic);
        ua[g].push(t.u_aleatoric);
        d[g].push(di);
    }
    if ue[1].len() < 2 || ue[0].len() < 2 {
        warnings.push("distribution-shift comparison needs at least 2 samples per group".into());
        return Ok(None);
    }
    let ue_ttest = match welch_ttest(&ue[1], &ue[0]) {
        Ok(t) => t,
        Err(e) => {
            warnings.push(format!("distribution-shift t-test skipped: {e}"));
            return Ok(None);
        }
    };
    Ok(Some(ShiftSection {
        n_shifted: ue[1].len(),
        n_in_distribution: ue[0].len(),
        mean_ue_shifted: mean(&ue[1]),
        mean_ue_in_distribution: mean(&ue[0]),
        mean_ua_shifted: mean(&ua[1]),
        mean_ua_in_distribution: mean(&ua[0]),
        mean_disagreement_shifted: mean(&d[1]),
        mean_disagreement_in_distribution: mean(&d[0]),
        ue_p_greater: ue_ttest.p_greater(),
        ue_ttest,
    }))
}

/// Flat CSV mirrors of the plot-facing arrays, by file name.
pub fn csv_mirrors(report: &AnalysisReport) -> Vec<(&'static str, Vec<u8>)> {
    let header = |cols: &[&str]| cols.iter().map(|c| c.to_string()).collect::<Vec<_>>();
    let mut out = Vec::new();

    let rows: Vec<Vec<String>> = report
        .models
        .iter()
        .flat_map(|(m, s)| {
            s.calibration.bins.iter().enumerate().map(move |(i, b)| {
                vec![
                    m.name().to_string(),
                    i.to_string(),
                    b.lo.to_string(),
                    b.hi.to_string(),
                    b.count.to_string(),
                    b.avg_confidence.to_string(),
                    b.accuracy.to_string(),
                ]
            })
        })
        .collect();
    out.push((
        "reliability.csv",
        table_csv(
            header(&[
                "model",
                "bin",
                "lo",
                "hi",
                "count",
                "avg_confidence",
                "accuracy",
            ]),
            rows.len(),
            |i| rows[i].clone(),
        ),
    ));

    let rows: Vec<Vec<String>> = report
        .models
        .iter()
        .map(|(m, s)| {
            let c = &s.calibration;
            [
                c.bce, c.ece, c.mce, c.sce, c.ace, c.tace, s.accuracy, s.mean_jsd,
            ]
            .iter()
            .map(|v| v.to_string())
            .fold(vec![m.name().to_string()], |mut acc, v| {
                acc.push(v);
                acc
            })
        })
        .collect();
    out.push((
        "calibration.csv",
        table_csv(
            header(&[
                "model", "bce", "ece", "mce", "sce", "ace", "tace", "accuracy", "mean_jsd",
            ]),
            rows.len(),
            |i| rows[i].clone(),
        ),
    ));

    let h = &report.disagreement_histogram;
    out.push((
        "disagreement_hist.csv",
        table_csv(
            header(&["lo", "hi", "count", "density"]),
            h.counts.len(),
            |i| {
                vec![
                    h.edges[i].to_string(),
                    h.edges[i + 1].to_string(),
                    h.counts[i].to_string(),
                    h.densities[i].to_string(),
                ]
            },
        ),
    ));

    if let Some(u) = &report.uncertainty {
        let rows: Vec<Vec<String>> = u
            .bce_percentile
            .iter()
            .flat_map(|(kind, curve)| {
                curve.iter().map(move |p| {
                    vec![
                        kind.clone(),
                        p.percentile.to_string(),
                        p.n_samples.to_string(),
                        p.n_pairs.to_string(),
                        p.bce.to_string(),
                    ]
                })
            })
            .collect();
        out.push((
            "bce_percentile.csv",
            table_csv(
                header(&["kind", "percentile", "n_samples", "n_pairs", "bce"]),
                rows.len(),
                |i| rows[i].clone(),
            ),
        ));

        let rows: Vec<Vec<String>> = u
            .rejection
            .iter()
            .flat_map(|(kind, curve)| {
                curve.points.iter().map(move |p| {
                    vec![
                        kind.clone(),
                        p.coverage.to_string(),
                        p.n_kept.to_string(),
                        p.accuracy.to_string(),
                    ]
                })
            })
            .collect();
        out.push((
            "rejection.csv",
            table_csv(
                header(&["kind", "coverage", "n_kept", "accuracy"]),
                rows.len(),
                |i| rows[i].clone(),
            ),
        ));

        let rows: Vec<Vec<String>> = u
            .correlations
            .iter()
            .map(|(name, r)| match r {
                Some(r) => vec![
                    name.clone(),
                    r.r.to_string(),
                    r.p_value.to_string(),
                    r.n.to_string(),
                ],
                None => vec![name.clone(), String::new(), String::new(), String::new()],
            })
            .collect();
        out.push((
            "correlations.csv",
            table_csv(header(&["pair", "r", "p_value", "n"]), rows.len(), |i| {
                rows[i].clone()
            }),
        ));
    }
    out
}
